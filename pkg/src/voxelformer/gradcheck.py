"""Central finite-difference verification of every differentiable operator
and of small end-to-end models, in float64.

Operator checks compare every input coordinate against (f(x+h) - f(x-h)) / 2h
with the error measured as |analytic - numeric| / max(|analytic|, 1e-8) and a
1e-4 bound. End-to-end model checks sample coordinates per parameter (full
enumeration would need one forward pair per weight) and use a scale-aware
error |a - n| / max(|a|, |n|, 1e-4) with a 1e-3 bound.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import functional as F
from .attention import RelativePositionBias, build_shift_mask, window_attention, window_partition
from .blocks import MixFFN3d, TransformerBlock
from .decoder import CrossAttentionFusion, SqueezeExcite
from .ghost import GhostConv3d, PatchEmbed3d, tokens_to_volume
from .losses import LossConfig, ce_loss, dice_loss, loss_terms
from .model import ModelConfig, SegOutput, build_model
from .nn import Conv3d, LayerNorm, Module
from .tensor import Parameter, Tensor, concat, no_grad, pad, roll, take_rows


class GradcheckFailure(Exception):
    pass


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:34s} max rel err {self.max_err:.3e} (tol {self.tol:.0e})"


def _spec_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), 1e-8)


def _scaled_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


def max_rel_err(make_loss: Callable[[Sequence[Tensor]], Tensor],
                arrays: Sequence[np.ndarray], h: float = 1e-5,
                err=_spec_err) -> float:
    """Worst per-coordinate error between tape gradients and central
    differences of a scalar built by ``make_loss`` from float64 inputs."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    make_loss(tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    work = [a.copy() for a in arrays]

    def evaluate() -> float:
        with no_grad():
            return make_loss([Tensor(a) for a in work]).item()

    worst = 0.0
    for arr, grad in zip(work, analytic):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            worst = max(worst, err(gflat[i], (up - down) / (2.0 * h)))
    return worst


def _frozen_projection(fn, arrays, seed: int):
    """Wrap ``fn`` into a deterministic scalar loss: project the output with a
    random weight array frozen once (so finite differencing sees a fixed
    function of the inputs)."""
    with no_grad():
        shape = fn([Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]).shape
    weights = Tensor(np.random.default_rng(seed).standard_normal(shape))
    return lambda ts: (fn(ts) * weights).sum()


# -- operator suite -------------------------------------------------------------


def _op_cases():
    rng = np.random.default_rng(7)
    r = rng.standard_normal
    cases = []

    def case(name, arrays, fn):
        cases.append((name, arrays, _frozen_projection(fn, arrays, seed=len(cases))))

    case("add_broadcast", [r((3, 4)), r((4,))], lambda ts: ts[0] + ts[1])
    case("mul_broadcast", [r((2, 3, 4)), r((3, 1))], lambda ts: ts[0] * ts[1])
    case("div", [r((3, 4)), 2.0 + np.abs(r((3, 4)))], lambda ts: ts[0] / ts[1])
    case("pow", [1.5 + np.abs(r((3, 4)))], lambda ts: ts[0] ** 1.7)
    case("matmul_batched", [r((2, 3, 4)), r((4, 5))], lambda ts: ts[0] @ ts[1])
    case("exp", [r((3, 4))], lambda ts: ts[0].exp())
    case("log", [1.0 + np.abs(r((3, 4)))], lambda ts: ts[0].log())
    case("sigmoid", [r((3, 4)) * 2], lambda ts: ts[0].sigmoid())
    # keep relu inputs away from the kink
    relu_in = r((3, 4))
    relu_in[np.abs(relu_in) < 0.05] += 0.2
    case("relu", [relu_in], lambda ts: ts[0].relu())
    case("silu", [r((3, 4))], lambda ts: F.silu(ts[0]))
    case("sum_axes", [r((2, 3, 4))], lambda ts: ts[0].sum(axis=(0, 2)))
    case("mean_keepdims", [r((2, 3, 4))], lambda ts: ts[0].mean(axis=1, keepdims=True))
    case("reshape_permute", [r((2, 3, 4))],
         lambda ts: ts[0].permute(2, 0, 1).reshape(4, 6))
    case("slice", [r((4, 5))], lambda ts: ts[0][1:3, ::2])
    case("pad", [r((2, 3))], lambda ts: pad(ts[0], [(1, 0), (2, 1)]))
    case("concat", [r((2, 3)), r((2, 2))], lambda ts: concat(ts, axis=1))
    case("roll", [r((2, 4, 4, 4, 3))], lambda ts: roll(ts[0], (1, 2), (1, 3)))
    case("take_rows", [r((6, 2))],
         lambda ts: take_rows(ts[0], np.array([0, 3, 3, 5, 1])))
    case("softmax", [r((3, 5)) * 3], lambda ts: F.softmax_lastdim(ts[0]))

    masked = r((2, 4, 5)) * 2
    neg_inf_mask = np.zeros((4, 5))
    neg_inf_mask[:, 3] = -np.inf
    case("softmax_masked", [masked],
         lambda ts: F.softmax_lastdim(ts[0] + Tensor(neg_inf_mask)))

    case("linear_bias", [r((2, 6, 3)), r((3, 4)), r((4,))],
         lambda ts: F.linear(ts[0], ts[1], ts[2]))
    case("layer_norm", [r((2, 5, 6)), 1 + 0.3 * r((6,)), 0.3 * r((6,))],
         lambda ts: F.layer_norm(ts[0], ts[1], ts[2]))
    case("group_norm", [r((2, 6, 3, 2, 2)), 1 + 0.3 * r((6,)), 0.3 * r((6,))],
         lambda ts: F.group_norm(ts[0], 3, ts[1], ts[2]))
    case("conv3d_s1", [r((2, 3, 4, 4, 4)), r((4, 3, 3, 3, 3))],
         lambda ts: F.conv3d(ts[0], ts[1], stride=1, padding=1))
    case("conv3d_s2", [r((1, 2, 7, 6, 5)), r((3, 2, 3, 3, 3))],
         lambda ts: F.conv3d(ts[0], ts[1], stride=2, padding=1))
    case("depthwise_conv3d", [r((2, 4, 4, 4, 4)), r((4, 1, 3, 3, 3))],
         lambda ts: F.depthwise_conv3d(ts[0], ts[1], stride=1, padding=1))
    case("trilinear_upsample", [r((1, 2, 3, 3, 3))],
         lambda ts: F.trilinear_upsample(ts[0], 2))
    case("global_avg_pool3d", [r((2, 3, 2, 3, 4))],
         lambda ts: F.global_avg_pool3d(ts[0]))

    shift_mask = build_shift_mask((4, 2, 2), (2, 2, 2), (1, 0, 0))
    case("window_attention_masked", [r((4, 8, 6)), r((4, 8, 6)), r((4, 8, 6))],
         lambda ts: window_attention(ts[0], ts[1], ts[2], heads=2, mask=shift_mask))

    labels = np.random.default_rng(3).integers(0, 3, size=(1, 2, 2, 2))
    case("dice_loss", [r((1, 3, 2, 2, 2))],
         lambda ts: dice_loss(ts[0], labels) * 1.0)
    case("ce_loss", [r((1, 3, 2, 2, 2))],
         lambda ts: ce_loss(ts[0], labels) * 1.0)
    return cases


def run_op_checks(tol: float = 1e-4, h: float = 1e-5) -> List[CheckResult]:
    results = []
    for name, arrays, fn in _op_cases():
        results.append(CheckResult(name, max_rel_err(fn, arrays, h=h), tol))
    return results


# -- end-to-end checks ----------------------------------------------------------


class _MicroSegNet(Module):
    """Pocket-size pyramid touching every layer family: ghost patch embedding,
    a shifted-window transformer pair, cross-attention skip fusion with SE,
    and a 1x1x1 head. Two classes, 8^3 input."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.embed = PatchEmbed3d(1, 4, rng, kernel=3, stride=2, padding=1,
                                  ratio=2, dtype=dtype)
        self.block1 = TransformerBlock(4, 1, (4, 4, 4), False, 0.0, rng, dtype=dtype)
        self.block2 = TransformerBlock(4, 1, (4, 4, 4), True, 0.0, rng, dtype=dtype)
        self.fuse = CrossAttentionFusion(4, 1, 4, rng, heads=4, window=4, dtype=dtype)
        self.head = Conv3d(4, 2, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> SegOutput:
        tokens, grid = self.embed(x)
        tokens = self.block1(tokens, grid)
        tokens = self.block2(tokens, grid)
        feat = self.fuse(tokens_to_volume(tokens, grid), x)
        return SegOutput(logits=self.head(feat), aux=[])


def check_model_grads(model: Module, forward_loss: Callable[[], Tensor],
                      h: float = 1e-4, coords_per_param: int = 8,
                      seed: int = 0) -> float:
    """Compare tape gradients of every Parameter against central differences
    at ``coords_per_param`` sampled coordinates each."""
    params = [p for _, p in model.named_parameters()]
    model.zero_grad()
    forward_loss().backward()
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        with no_grad():
            return forward_loss().item()

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        count = min(coords_per_param, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            worst = max(worst, _scaled_err(gflat[i], (up - down) / (2.0 * h)))
    return worst


def run_end_to_end_checks(tol: float = 1e-3) -> List[CheckResult]:
    results = []
    rng = np.random.default_rng(11)

    micro = _MicroSegNet(np.random.default_rng(5))
    x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)))
    labels = rng.integers(0, 2, size=(2, 8, 8, 8))
    cfg = LossConfig(aux_weight=0.0, num_classes=2)

    def micro_loss():
        return loss_terms(micro.forward(x), labels, cfg)["total"]

    results.append(CheckResult(
        "micro_pyramid_8cube", check_model_grads(micro, micro_loss, coords_per_param=12),
        tol))

    config = ModelConfig(in_channels=1, num_classes=2, stage_channels=(8, 8, 16, 16),
                         heads=(1, 2, 4, 8), drop_path_max=0.0, seed=3)
    full = build_model(config, dtype=np.float64)
    x_full = Tensor(rng.standard_normal((2, 1, 16, 16, 16)))
    labels_full = rng.integers(0, 2, size=(2, 16, 16, 16))
    full_cfg = LossConfig(aux_weight=0.4, num_classes=2)

    def full_loss():
        return loss_terms(full.forward(x_full), labels_full, full_cfg)["total"]

    results.append(CheckResult(
        "four_stage_16cube", check_model_grads(full, full_loss, coords_per_param=4),
        tol))
    return results


def run_all() -> List[CheckResult]:
    return run_op_checks() + run_end_to_end_checks()
