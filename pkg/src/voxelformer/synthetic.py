"""Synthetic volumetric segmentation tasks, geometric augmentation, and the
raw volume file format used by the CLI.

Volumes are (C, D, H, W) float32 intensities with (D, H, W) integer labels.
Each foreground class is a random ellipsoid (or a nested shell); classes get
separated mean intensities plus Gaussian noise, so the task is learnable at
desk scale but not trivial for a constant predictor.
"""

import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np


@dataclass
class SyntheticTaskConfig:
    volume_size: int = 32
    num_classes: int = 3
    in_channels: int = 1
    num_train: int = 4
    num_val: int = 2
    shape_mode: str = "ellipsoids"  # or "shells"
    noise_std: float = 0.1
    intensity_gap: float = 1.0
    min_class_fraction: float = 0.001  # regenerate until every class clears this

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.volume_size < 8:
            raise ValueError(f"volume_size must be >= 8, got {self.volume_size}")
        if self.shape_mode not in ("ellipsoids", "shells"):
            raise ValueError(f"shape_mode must be 'ellipsoids' or 'shells', got {self.shape_mode!r}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


def _paint_labels(cfg: SyntheticTaskConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.volume_size
    coords = np.stack(np.meshgrid(*[np.arange(s)] * 3, indexing="ij"), axis=-1)
    labels = np.zeros((s, s, s), dtype=np.int64)
    if cfg.shape_mode == "ellipsoids":
        for c in range(1, cfg.num_classes):
            center = rng.uniform(0.3 * s, 0.7 * s, size=3)
            semi = rng.uniform(0.12 * s, 0.3 * s, size=3)
            inside = (((coords - center) / semi) ** 2).sum(axis=-1) <= 1.0
            labels[inside] = c
    else:
        center = rng.uniform(0.4 * s, 0.6 * s, size=3)
        radii = np.sort(rng.uniform(0.12 * s, 0.42 * s, size=cfg.num_classes - 1))[::-1]
        dist = np.sqrt(((coords - center) ** 2).sum(axis=-1))
        for c, radius in enumerate(radii, start=1):
            labels[dist <= radius] = c
    return labels


def generate_volume(cfg: SyntheticTaskConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (intensities, labels) sample, deterministic in (cfg, seed).

    Regenerates geometry until every class covers min_class_fraction of the
    voxels (a class can be fully overwritten by a later one).
    """
    rng = np.random.default_rng(seed)
    n = cfg.volume_size ** 3
    need = max(1, int(round(cfg.min_class_fraction * n)))
    labels = None
    for _ in range(50):
        candidate = _paint_labels(cfg, rng)
        counts = np.bincount(candidate.reshape(-1), minlength=cfg.num_classes)
        if (counts >= need).all():
            labels = candidate
            break
    if labels is None:
        raise RuntimeError(
            f"could not place {cfg.num_classes} classes with fraction >= "
            f"{cfg.min_class_fraction} in 50 attempts (seed {seed})")

    means = np.arange(cfg.num_classes, dtype=np.float32) * cfg.intensity_gap
    x = np.empty((cfg.in_channels, *labels.shape), dtype=np.float32)
    for ch in range(cfg.in_channels):
        base = means[labels] + 0.25 * ch
        x[ch] = base + cfg.noise_std * rng.standard_normal(labels.shape)
    return x, labels


def generate_split(cfg: SyntheticTaskConfig, seed: int) -> Tuple[List, List]:
    """(train, val) lists of (x, labels); val seeds are offset so the split is
    disjoint for any number of volumes."""
    train = [generate_volume(cfg, seed + i) for i in range(cfg.num_train)]
    val = [generate_volume(cfg, seed + 100_000 + i) for i in range(cfg.num_val)]
    return train, val


def augment(x: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
            noise_std: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Axis flips (p=0.5 each), one random 90-degree rotation in a random axis
    pair, then additive Gaussian noise on intensities only. Labels follow the
    geometry exactly and are never noised."""
    for axis in range(3):
        if rng.random() < 0.5:
            x = np.flip(x, axis=axis + 1)
            labels = np.flip(labels, axis=axis)
    pairs = ((0, 1), (0, 2), (1, 2))
    pair = pairs[rng.integers(0, 3)]
    k = int(rng.integers(0, 4))
    x = np.rot90(x, k, axes=(pair[0] + 1, pair[1] + 1))
    labels = np.rot90(labels, k, axes=pair)
    x = np.ascontiguousarray(x, dtype=np.float32)
    labels = np.ascontiguousarray(labels)
    if noise_std > 0:
        x = x + noise_std * rng.standard_normal(x.shape).astype(np.float32)
    return x, labels


# -- raw volume files ------------------------------------------------------------
#
#   magic "RVOL" | u8 dtype (0 float32, 1 int32) | u8 ndim | u32 extents | data LE

VOLUME_MAGIC = b"RVOL"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def write_volume(path: str, array: np.ndarray) -> None:
    if np.issubdtype(array.dtype, np.floating):
        code, dtype = 0, _DTYPES[0]
    elif np.issubdtype(array.dtype, np.integer):
        code, dtype = 1, _DTYPES[1]
    else:
        raise ValueError(f"unsupported volume dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<BB", code, array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_volume(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not a raw volume file (bad magic {blob[:4]!r})")
    code, ndim = struct.unpack("<BB", blob[4:6])
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", blob[6:6 + 4 * ndim])
    start = 6 + 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = start + count * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {shape}, "
                         f"file has {len(blob)}")
    return np.frombuffer(blob[start:], dtype=_DTYPES[code]).reshape(shape).copy()
