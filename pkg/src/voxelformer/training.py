"""Training loop, evaluation, and test-time augmentation.

A run is a deterministic function of (config, seed): the model seed fixes
the weights, and batch sampling / augmentation / stochastic depth use
generators derived from it, so two single-threaded runs produce bit-identical
loss curves and checkpoints.
"""

import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .checkpoint import save_checkpoint
from .config import RunConfig
from .losses import dice_scores, loss_terms
from .model import VoxelFormer, build_model
from .optim import AdamW, lr_schedule
from .synthetic import augment, generate_split
from .tensor import Tensor, no_grad


def csv_header(num_classes: int) -> str:
    dice_cols = ",".join(f"dice_c{c}" for c in range(num_classes))
    return f"step,lr,loss_total,loss_dice,loss_ce,{dice_cols},wall_ms"


def _format_row(row: Dict[str, float], num_classes: int) -> str:
    dice = ",".join(repr(float(row["dice"][c])) for c in range(num_classes))
    return (f"{row['step']},{row['lr']!r},{row['loss_total']!r},"
            f"{row['loss_dice']!r},{row['loss_ce']!r},{dice},{row['wall_ms']!r}")


@dataclass
class TrainResult:
    steps_run: int
    history: List[Dict[str, float]]
    val_foreground_dice: List[Tuple[int, float]]
    reached_step: Optional[int]  # first step hitting early_stop_dice, if set
    checkpoint_path: Optional[str] = None
    metrics_path: Optional[str] = None
    model: Optional[VoxelFormer] = None

    def losses(self) -> np.ndarray:
        return np.array([row["loss_total"] for row in self.history])


def evaluate_dice(model: VoxelFormer, volumes: Sequence[Tuple[np.ndarray, np.ndarray]],
                  num_classes: int) -> np.ndarray:
    """Mean per-class hard Dice over a list of (x, labels) volumes."""
    totals = np.zeros(num_classes)
    with no_grad():
        for x, labels in volumes:
            out = model.forward(Tensor(x[None]), training=False)
            pred = np.argmax(out.logits.data[0], axis=0)
            totals += dice_scores(pred, labels, num_classes)
    return totals / max(len(volumes), 1)


def foreground_mean(per_class: np.ndarray) -> float:
    return float(per_class[1:].mean())


def train_run(cfg: RunConfig, out_dir: Optional[str] = None,
              log=None) -> TrainResult:
    cfg.validate()
    seed = cfg.model.seed
    k = cfg.model.num_classes

    model = build_model(cfg.model)
    train_set, val_set = generate_split(cfg.data, seed + 1)

    trainable = [(n, p) for n, p in model.named_parameters()
                 if not any(n.startswith(pre) for pre in cfg.train.freeze_prefixes)]
    if cfg.train.freeze_prefixes and len(trainable) == len(list(model.named_parameters())):
        raise ValueError(f"freeze_prefixes {cfg.train.freeze_prefixes} matched no parameters")
    opt = AdamW([p for _, p in trainable], lr=cfg.train.base_lr,
                betas=cfg.train.betas, weight_decay=cfg.train.weight_decay)

    rng_batch = np.random.default_rng(seed + 2)
    rng_aug = np.random.default_rng(seed + 3)
    rng_drop = np.random.default_rng(seed + 4)

    steps_per_epoch = max(1, cfg.data.num_train // cfg.train.batch_size)
    warmup = cfg.train.resolved_warmup(steps_per_epoch)
    schedule_end = cfg.train.resolved_schedule(steps_per_epoch)

    history: List[Dict[str, float]] = []
    val_trace: List[Tuple[int, float]] = []
    reached: Optional[int] = None

    steps_run = 0
    for step in range(cfg.train.steps):
        t0 = time.perf_counter()
        idx = rng_batch.choice(len(train_set), size=cfg.train.batch_size, replace=False)
        xs, ys = [], []
        for i in idx:
            x, y = train_set[i]
            if cfg.train.augment:
                x, y = augment(x, y, rng_aug, cfg.train.augment_noise_std)
            xs.append(x)
            ys.append(y)
        xb = Tensor(np.stack(xs))
        yb = np.stack(ys)

        out = model.forward(xb, training=True, rng=rng_drop)
        terms = loss_terms(out, yb, cfg.loss)
        model.zero_grad()
        terms["total"].backward()
        lr_t = lr_schedule(step, warmup, schedule_end,
                           cfg.train.base_lr, cfg.train.min_lr)
        opt.step(lr_t)

        pred = np.argmax(out.logits.data, axis=1)
        batch_dice = dice_scores(pred, yb, k)
        wall_ms = 1e3 * (time.perf_counter() - t0)
        history.append({
            "step": step,
            "lr": lr_t,
            "loss_total": terms["total"].item(),
            "loss_dice": terms["dice"].item(),
            "loss_ce": terms["ce"].item(),
            "dice": batch_dice,
            "wall_ms": wall_ms,
        })
        steps_run = step + 1

        last = step == cfg.train.steps - 1
        if (step + 1) % cfg.train.val_every == 0 or last:
            val_dice = evaluate_dice(model, val_set, k) if val_set else np.zeros(k)
            val_trace.append((step, foreground_mean(val_dice)))
            if log:
                log(f"step {step + 1}/{cfg.train.steps} loss {terms['total'].item():.4f} "
                    f"lr {lr_t:.2e} val fg dice {foreground_mean(val_dice):.4f}")
            if cfg.train.early_stop_dice is not None:
                train_dice = evaluate_dice(model, train_set, k)
                if foreground_mean(train_dice) >= cfg.train.early_stop_dice:
                    reached = step + 1
                    if log:
                        log(f"early stop: train fg dice {foreground_mean(train_dice):.4f} "
                            f">= {cfg.train.early_stop_dice} at step {reached}")
                    break

    result = TrainResult(steps_run=steps_run, history=history,
                         val_foreground_dice=val_trace, reached_step=reached,
                         model=model)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.checkpoint_path = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(model, result.checkpoint_path)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(result.metrics_path, "w") as fh:
            fh.write(csv_header(k) + "\n")
            for row in history:
                fh.write(_format_row(row, k) + "\n")
    return result


def tta_predict(model: VoxelFormer, x: Tensor) -> np.ndarray:
    """Average softmax probabilities over the 8 spatial flip combinations,
    un-flipping each prediction before averaging. Returns (B, K, D, H, W)."""
    flip_sets = [()]
    for axes in [(2,), (3,), (4,), (2, 3), (2, 4), (3, 4), (2, 3, 4)]:
        flip_sets.append(axes)
    acc = None
    with no_grad():
        for axes in flip_sets:
            data = np.flip(x.data, axes).copy() if axes else x.data
            out = model.forward(Tensor(data), training=False)
            logits = out.logits.data
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            probs = e / e.sum(axis=1, keepdims=True)
            if axes:
                probs = np.flip(probs, axes)
            acc = probs if acc is None else acc + probs
    return acc / len(flip_sets)
