"""Segmentation objectives: soft Dice, voxelwise cross-entropy, and the
deep-supervised combination (main + weighted auxiliary terms, each term
Dice + CE, auxiliary logits upsampled to label resolution first)."""

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import functional as F
from .model import SegOutput
from .tensor import Tensor


@dataclass
class LossConfig:
    aux_weight: float = 0.4
    dice_eps: float = 1e-5
    num_classes: int = 4
    include_background: bool = True  # Dice averages over all classes by default

    def __post_init__(self):
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.dice_eps <= 0:
            raise ValueError(f"dice_eps must be > 0, got {self.dice_eps}")


def _check_labels(target: np.ndarray, num_classes: int) -> np.ndarray:
    target = np.asarray(target)
    if target.min() < 0 or target.max() >= num_classes:
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{target.min()}, {target.max()}]")
    return target


def _one_hot(target: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    eye = np.eye(num_classes, dtype=dtype)
    return eye[target]  # (B, D, H, W, K)


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = 1e-5,
              include_background: bool = True) -> Tensor:
    """Soft Dice on softmax probabilities, averaged over classes and batch.

    Per class: 1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps), sums over
    voxels of one sample.
    """
    k = logits.shape[1]
    target = _check_labels(target, k)
    probs = F.softmax_lastdim(logits.permute(0, 2, 3, 4, 1))  # (B, D, H, W, K)
    onehot = _one_hot(target, k, logits.data.dtype)
    if not include_background:
        probs = probs[:, :, :, :, 1:]
        onehot = onehot[..., 1:]
    tsum = Tensor(onehot.sum(axis=(1, 2, 3)))
    inter = (probs * Tensor(onehot)).sum(axis=(1, 2, 3))  # (B, K)
    psum = probs.sum(axis=(1, 2, 3))
    dice = (inter * 2.0 + eps) / (psum + tsum + eps)
    return (1.0 - dice).mean()


def ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean voxelwise negative log-softmax of the true class."""
    k = logits.shape[1]
    target = _check_labels(target, k)
    z = logits.permute(0, 2, 3, 4, 1)  # (B, D, H, W, K)
    # constant max shift keeps exp in range; the gradient is exact either way
    shift = Tensor(np.max(z.data, axis=-1, keepdims=True))
    lse = (z - shift).exp().sum(axis=-1, keepdims=True).log() + shift
    true_logit = (z * Tensor(_one_hot(target, k, logits.data.dtype))).sum(
        axis=-1, keepdims=True)
    return (lse - true_logit).mean()


def loss_terms(out: SegOutput, target: np.ndarray, cfg: LossConfig) -> Dict[str, Tensor]:
    """All loss pieces: the total plus the main Dice / CE terms for logging."""
    main_dice = dice_loss(out.logits, target, cfg.dice_eps, cfg.include_background)
    main_ce = ce_loss(out.logits, target)
    total = main_dice + main_ce
    full_extent = out.logits.shape[2:]
    for aux in out.aux:
        scales = {full_extent[i] // aux.shape[2 + i] for i in range(3)}
        if len(scales) != 1 or full_extent[0] % aux.shape[2] != 0:
            raise ValueError(
                f"auxiliary logits {aux.shape} are not an integer downscale of "
                f"labels at {full_extent}")
        up = F.trilinear_upsample(aux, scales.pop())
        aux_term = (dice_loss(up, target, cfg.dice_eps, cfg.include_background)
                    + ce_loss(up, target))
        total = total + cfg.aux_weight * aux_term
    return {"total": total, "dice": main_dice, "ce": main_ce}


def total_loss(out: SegOutput, target: np.ndarray, cfg: LossConfig) -> Tensor:
    """Deep-supervised objective: L(main) + aux_weight * sum L(aux_i)."""
    return loss_terms(out, target, cfg)["total"]


def dice_scores(pred_labels: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Hard per-class Dice of an argmax prediction; empty-vs-empty counts 1."""
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        p = pred_labels == c
        t = target == c
        denom = p.sum() + t.sum()
        scores[c] = 1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom
    return scores
