"""Full network assembly, configuration, and the analytic accounting
(parameter counts and FLOP estimates) that the CLI reports.

Topology: four encoder stages (each halving resolution, two transformer
blocks per stage), three cross-attention fusion stages consuming the skips
in reverse, one skip-free final upsampling block, a 1x1x1 segmentation head,
and auxiliary heads on the outputs of fusion stages 2 and 3.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import attention_flops, cross_attention_flops, padded_grid
from .blocks import (EncoderStage, dense_mlp_param_count, drop_path_schedule,
                     mixffn_param_count, mixffn_rank)
from .decoder import (AuxHead, ConcatConvFusion, CrossAttentionFusion,
                      FinalUpsampleBlock, groupnorm_groups)
from .ghost import ghost_param_count, standard_param_count
from .nn import Conv3d, Module, assign_parameter_names
from .tensor import Tensor

DECODER_HEADS = 4
SE_REDUCTION = 16

EMBEDDING_VARIANTS = ("ghost", "standard")
FFN_VARIANTS = ("mixffn", "dense")
FUSION_VARIANTS = ("crossattn", "concat")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ModelConfig:
    in_channels: int = 4
    num_classes: int = 4
    stage_channels: Tuple[int, int, int, int] = (32, 64, 128, 256)
    heads: Tuple[int, int, int, int] = (1, 2, 4, 8)
    encoder_window: Tuple[int, int, int] = (4, 4, 4)
    decoder_window: int = 4
    ghost_ratio: int = 2
    drop_path_max: float = 0.1
    embedding: str = "ghost"
    ffn: str = "mixffn"
    fusion: str = "crossattn"
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.heads = tuple(int(h) for h in self.heads)
        self.encoder_window = tuple(int(w) for w in self.encoder_window)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.stage_channels) != 4:
            raise ConfigError(
                f"stage_channels must list 4 encoder widths, got {self.stage_channels}")
        if len(self.heads) != 4:
            raise ConfigError(f"heads must list 4 counts, got {self.heads}")
        for i, (c, h) in enumerate(zip(self.stage_channels, self.heads)):
            if c < 1:
                raise ConfigError(f"stage_channels[{i}] must be >= 1, got {c}")
            if h < 1:
                raise ConfigError(f"heads[{i}] must be >= 1, got {h}")
            if c % h != 0:
                raise ConfigError(
                    f"stage_channels[{i}]={c} not divisible by heads[{i}]={h}")
        for i, c in enumerate(self.stage_channels[1:], start=1):
            if c % DECODER_HEADS != 0:
                raise ConfigError(
                    f"stage_channels[{i}]={c} not divisible by the {DECODER_HEADS} "
                    f"decoder cross-attention heads")
        for i, c in enumerate(self.stage_channels):
            if c >= 8 and c % 8 != 0:
                raise ConfigError(
                    f"stage_channels[{i}]={c} must be divisible by 8 (GroupNorm groups)")
        if len(self.encoder_window) != 3 or any(w < 1 for w in self.encoder_window):
            raise ConfigError(f"encoder_window must be 3 positive ints, got {self.encoder_window}")
        if self.decoder_window < 1:
            raise ConfigError(f"decoder_window must be >= 1, got {self.decoder_window}")
        if self.ghost_ratio < 1:
            raise ConfigError(f"ghost_ratio must be >= 1, got {self.ghost_ratio}")
        if min(self.stage_channels) < self.ghost_ratio and self.embedding == "ghost":
            raise ConfigError(
                f"ghost_ratio={self.ghost_ratio} leaves no primary channels at width "
                f"{min(self.stage_channels)}")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError(f"drop_path_max must be in [0, 1), got {self.drop_path_max}")
        if self.embedding not in EMBEDDING_VARIANTS:
            raise ConfigError(f"embedding must be one of {EMBEDDING_VARIANTS}, got {self.embedding!r}")
        if self.ffn not in FFN_VARIANTS:
            raise ConfigError(f"ffn must be one of {FFN_VARIANTS}, got {self.ffn!r}")
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion must be one of {FUSION_VARIANTS}, got {self.fusion!r}")

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stage_channels": list(self.stage_channels),
            "heads": list(self.heads),
            "encoder_window": list(self.encoder_window),
            "decoder_window": self.decoder_window,
            "ghost_ratio": self.ghost_ratio,
            "drop_path_max": self.drop_path_max,
            "embedding": self.embedding,
            "ffn": self.ffn,
            "fusion": self.fusion,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> bytes:
        """sha256 over the canonicalized architecture fields.

        The seed is excluded: it determines initialization, not architecture,
        and checkpoints carry trained weights.
        """
        arch = self.to_dict()
        del arch["seed"]
        canon = json.dumps(arch, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()


@dataclass
class SegOutput:
    """Final logits at input resolution plus auxiliary logits at the native
    resolutions of fusion stages 2 and 3."""
    logits: Tensor
    aux: List[Tensor]


class VoxelFormer(Module):
    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)

        c = config.stage_channels
        use_ghost = config.embedding == "ghost"
        probs = drop_path_schedule(config.drop_path_max, 8)

        self.encoder = []
        c_in = config.in_channels
        for i in range(4):
            self.encoder.append(EncoderStage(
                c_in, c[i], config.heads[i], config.encoder_window,
                (probs[2 * i], probs[2 * i + 1]), rng,
                ghost_ratio=config.ghost_ratio, use_ghost=use_ghost,
                ffn=config.ffn, dtype=dtype))
            c_in = c[i]

        fusion_plan = [(c[3], c[2], c[2]), (c[2], c[1], c[1]), (c[1], c[0], c[0])]
        self.fusions = []
        for c_dec, c_skip, c_out in fusion_plan:
            if config.fusion == "crossattn":
                self.fusions.append(CrossAttentionFusion(
                    c_dec, c_skip, c_out, rng, heads=DECODER_HEADS,
                    window=config.decoder_window, ghost_ratio=config.ghost_ratio,
                    use_ghost=use_ghost, dtype=dtype))
            else:
                self.fusions.append(ConcatConvFusion(c_dec, c_skip, c_out, rng, dtype=dtype))

        self.final_block = FinalUpsampleBlock(c[0], rng, ghost_ratio=config.ghost_ratio,
                                              use_ghost=use_ghost, dtype=dtype)
        self.seg_head = Conv3d(c[0], config.num_classes, 1, rng, dtype=dtype)
        self.aux_heads = [AuxHead(c[1], config.num_classes, rng, dtype=dtype),
                          AuxHead(c[0], config.num_classes, rng, dtype=dtype)]
        assign_parameter_names(self)

    def _validate_input(self, x: Tensor) -> None:
        if x.ndim != 5:
            raise ValueError(f"expected input (B, C, D, H, W), got shape {x.shape}")
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, model expects {self.config.in_channels}")
        for name, extent in zip("DHW", x.shape[2:]):
            if extent < 16 or extent % 16 != 0:
                raise ValueError(
                    f"input extent {name}={extent} must be a multiple of 16 "
                    f"(four stride-2 stages); pad the volume first")
        if x.data.dtype != self.dtype:
            raise ValueError(f"input dtype {x.data.dtype} != model dtype {np.dtype(self.dtype)}")

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> SegOutput:
        self._validate_input(x)
        if training and self.config.drop_path_max > 0 and rng is None:
            raise ValueError("training forward with drop_path_max > 0 needs an rng")
        self.train(training)

        skips = []
        feat = x
        for stage in self.encoder:
            feat = stage(feat, rng)
            skips.append(feat)

        dec = skips[3]
        dec = self.fusions[0](dec, skips[2])
        f2 = self.fusions[1](dec, skips[1])
        f3 = self.fusions[2](f2, skips[0])
        full = self.final_block(f3)
        logits = self.seg_head(full)
        aux = [self.aux_heads[0](f2), self.aux_heads[1](f3)]
        return SegOutput(logits=logits, aux=aux)


def build_model(config: ModelConfig, dtype=np.float32) -> VoxelFormer:
    """Deterministic construction: two builds from the same config and seed
    produce bit-identical weights."""
    return VoxelFormer(config, dtype=dtype)


# -- parameter accounting ------------------------------------------------------


def count_params(model: VoxelFormer) -> Tuple[int, Dict[str, int]]:
    """Runtime parameter count with a per-component breakdown that sums to
    the total exactly."""
    breakdown: Dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "fusions", "aux_heads") else parts[0]
        breakdown[key] = breakdown.get(key, 0) + p.size
    return sum(breakdown.values()), breakdown


def _embed_params(c_in: int, c_out: int, ratio: int, use_ghost: bool) -> int:
    conv = (ghost_param_count(c_in, c_out, 3, ratio) if use_ghost
            else standard_param_count(c_in, c_out, 3))
    return conv + c_out * 27 + 2 * c_out  # + positional depthwise + LayerNorm


def _block_params(c: int, heads: int, window, ffn: str) -> int:
    wd, wh, ww = window
    bias_rows = (2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1)
    attn = 4 * c * c + bias_rows * heads
    ffn_params = mixffn_param_count(c) if ffn == "mixffn" else dense_mlp_param_count(c)
    return 2 * (2 * c) + attn + ffn_params


def _refine_params(c: int, ratio: int, use_ghost: bool) -> int:
    conv = (ghost_param_count(c, c, 3, ratio) if use_ghost
            else standard_param_count(c, c, 3))
    return conv + 2 * c  # + GroupNorm


def _fusion_params(c_dec: int, c_skip: int, c_out: int, cfg: ModelConfig) -> int:
    if cfg.fusion == "concat":
        return (c_skip * c_dec + c_dec            # skip projection + bias
                + 2 * c_dec * c_out * 27          # merge convolution
                + 2 * c_out)                      # GroupNorm
    se_hidden = max(c_out // SE_REDUCTION, 1)
    return (c_skip * c_dec + c_dec                # skip projection + bias
            + c_dec * c_dec                       # query projection
            + c_dec * 2 * c_dec                   # key-value projection
            + c_dec * c_out                       # output projection
            + 2 * c_out * se_hidden               # squeeze-excitation pair
            + _refine_params(c_out, cfg.ghost_ratio, cfg.embedding == "ghost"))


def analytic_param_count(config: ModelConfig) -> Tuple[int, Dict[str, int]]:
    """Closed-form parameter count; must equal count_params exactly."""
    c = config.stage_channels
    use_ghost = config.embedding == "ghost"
    breakdown: Dict[str, int] = {}
    c_in = config.in_channels
    for i in range(4):
        stage = _embed_params(c_in, c[i], config.ghost_ratio, use_ghost)
        stage += 2 * _block_params(c[i], config.heads[i], config.encoder_window, config.ffn)
        breakdown[f"encoder.{i}"] = stage
        c_in = c[i]
    for j, (c_dec, c_skip, c_out) in enumerate(
            [(c[3], c[2], c[2]), (c[2], c[1], c[1]), (c[1], c[0], c[0])]):
        breakdown[f"fusions.{j}"] = _fusion_params(c_dec, c_skip, c_out, config)
    breakdown["final_block"] = _refine_params(c[0], config.ghost_ratio, use_ghost)
    breakdown["seg_head"] = c[0] * config.num_classes
    breakdown["aux_heads.0"] = c[1] * config.num_classes
    breakdown["aux_heads.1"] = c[0] * config.num_classes
    return sum(breakdown.values()), breakdown


# -- FLOP accounting -----------------------------------------------------------
#
# Conventions: one multiply-accumulate = 2 FLOPs; convolutions, linear maps,
# attention matmuls, trilinear gathers, and SE gating are counted;
# normalization, softmax, and activations are excluded. Counts are per
# single-sample forward (batch 1).


def _conv_flops(c_in: int, c_out: int, k: int, vox: int) -> int:
    return 2 * c_in * c_out * k ** 3 * vox


def _dw_flops(c: int, k: int, vox: int) -> int:
    return 2 * c * k ** 3 * vox


def _ghost_flops(c_in: int, c_out: int, k: int, ratio: int, vox: int, use_ghost: bool) -> int:
    if not use_ghost:
        return _conv_flops(c_in, c_out, k, vox)
    c_primary = c_out // ratio
    return _conv_flops(c_in, c_primary, k, vox) + _dw_flops(c_out - c_primary, 3, vox)


def _upsample_flops(c: int, out_vox: int) -> int:
    return 16 * c * out_vox  # 8 corner MACs per output voxel per channel


def _mixffn_flops(d: int, vox: int) -> int:
    r = mixffn_rank(d)
    return 4 * vox * d * r + _dw_flops(r, 3, vox)


def _dense_mlp_flops(d: int, vox: int) -> int:
    return 16 * d * d * vox


def estimate_flops(config: ModelConfig,
                   input_shape: Sequence[int]) -> Tuple[int, Dict[str, int]]:
    """Analytic per-layer FLOP estimate for one forward pass at batch 1.

    ``input_shape`` is the spatial (D, H, W); extents must be multiples
    of 16, mirroring forward's contract. Attention terms are counted on the
    window-padded grids actually used.
    """
    d, h, w = (int(s) for s in input_shape)
    for name, extent in zip("DHW", (d, h, w)):
        if extent < 16 or extent % 16 != 0:
            raise ValueError(f"input extent {name}={extent} must be a multiple of 16")

    c = config.stage_channels
    use_ghost = config.embedding == "ghost"
    breakdown: Dict[str, int] = {}

    grids = [(d >> i, h >> i, w >> i) for i in range(1, 5)]  # stage outputs /2 to /16
    c_in = config.in_channels
    for i in range(4):
        g = grids[i]
        vox = g[0] * g[1] * g[2]
        total = _ghost_flops(c_in, c[i], 3, config.ghost_ratio, vox, use_ghost)
        total += _dw_flops(c[i], 3, vox)  # positional conv
        pg = padded_grid(g, config.encoder_window)
        attn = attention_flops(pg, config.encoder_window, c[i], config.heads[i])
        ffn = (_mixffn_flops(c[i], vox) if config.ffn == "mixffn"
               else _dense_mlp_flops(c[i], vox))
        total += 2 * (attn + ffn)
        breakdown[f"encoder.{i}"] = total
        c_in = c[i]

    dw = (config.decoder_window,) * 3
    fusion_plan = [(c[3], c[2], c[2], grids[2]), (c[2], c[1], c[1], grids[1]),
                   (c[1], c[0], c[0], grids[0])]
    for j, (c_dec, c_skip, c_out, g) in enumerate(fusion_plan):
        vox = g[0] * g[1] * g[2]
        total = _upsample_flops(c_dec, vox)
        total += 2 * vox * c_skip * c_dec  # skip projection
        if config.fusion == "crossattn":
            total += cross_attention_flops(padded_grid(g, dw), dw, c_dec, c_out)
            se_hidden = max(c_out // SE_REDUCTION, 1)
            total += 4 * c_out * se_hidden + 2 * vox * c_out  # SE mlp + gating
            total += _ghost_flops(c_out, c_out, 3, config.ghost_ratio, vox, use_ghost)
        else:
            total += _conv_flops(2 * c_dec, c_out, 3, vox)
        breakdown[f"fusions.{j}"] = total

    full_vox = d * h * w
    breakdown["final_block"] = (_upsample_flops(c[0], full_vox)
                                + _ghost_flops(c[0], c[0], 3, config.ghost_ratio,
                                               full_vox, use_ghost))
    heads_total = _conv_flops(c[0], config.num_classes, 1, full_vox)
    heads_total += _conv_flops(c[1], config.num_classes, 1,
                               grids[1][0] * grids[1][1] * grids[1][2])
    heads_total += _conv_flops(c[0], config.num_classes, 1,
                               grids[0][0] * grids[0][1] * grids[0][2])
    breakdown["heads"] = heads_total
    return sum(breakdown.values()), breakdown


def attention_flops_total(config: ModelConfig, input_shape: Sequence[int]) -> int:
    """Sum of all windowed-attention FLOPs in one forward; linear in voxel
    count at fixed window sizes."""
    d, h, w = (int(s) for s in input_shape)
    total = 0
    grids = [(d >> i, h >> i, w >> i) for i in range(1, 5)]
    for i in range(4):
        pg = padded_grid(grids[i], config.encoder_window)
        total += 2 * attention_flops(pg, config.encoder_window,
                                     config.stage_channels[i], config.heads[i])
    if config.fusion == "crossattn":
        c = config.stage_channels
        dw = (config.decoder_window,) * 3
        for c_dec, c_out, g in [(c[3], c[2], grids[2]), (c[2], c[1], grids[1]),
                                (c[1], c[0], grids[0])]:
            total += cross_attention_flops(padded_grid(g, dw), dw, c_dec, c_out)
    return total


# Published figures for the original configuration of this architecture
# (stage widths undisclosed there); reported by the CLI as context only,
# never asserted by tests.
PUBLISHED_REFERENCE = {
    "params_millions": 2.94,
    "params_millions_standard_conv": 4.87,
    "gflops": 191.2,
    "gpu_ms": 8.35,
    "cpu_ms": 296.2,
    "ms_per_gflop": 0.043,
    "input": "1x4x128x128x128",
}
