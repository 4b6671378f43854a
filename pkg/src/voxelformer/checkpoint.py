"""Checkpoint container: a config fingerprint plus ordered named weight
records, serialized bit-exactly.

Layout (all integers little-endian u32):

    magic "VXF1CKPT" | version | sha256 fingerprint (32 bytes) | record count
    per record: name_len | name utf-8 | ndim | extents... | float32 LE data

Loading a checkpoint whose fingerprint does not match the supplied config is
an error reporting both fingerprints; corrupt headers and truncated records
raise distinct errors and are never silently zero-filled.
"""

import struct
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .model import ModelConfig, VoxelFormer

MAGIC = b"VXF1CKPT"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Corrupt header or malformed structure."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this build."""


class CheckpointTruncatedError(CheckpointError):
    """File ends inside a record."""


class CheckpointFingerprintError(CheckpointError):
    """Config fingerprint does not match the stored one."""


def save_checkpoint(model: "VoxelFormer", path: str) -> None:
    params = list(model.named_parameters())
    for name, p in params:
        if p.data.dtype != np.float32:
            raise ValueError(
                f"checkpoints store float32 weights; parameter {name!r} is {p.data.dtype} "
                f"(64-bit models are for gradient checking, not persistence)")
    chunks = [MAGIC, struct.pack("<I", VERSION), model.config.fingerprint(),
              struct.pack("<I", len(params))]
    for name, p in params:
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint ends inside {what} (needed {n} bytes at offset {self.offset}, "
                f"file has {len(self.blob)})")
        piece = self.blob[self.offset:self.offset + n]
        self.offset += n
        return piece

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str, config: "ModelConfig") -> "VoxelFormer":
    """Rebuild a model from ``config`` and overwrite its weights from disk.

    Round trip guarantee: load(save(m)) produces bit-identical eval-mode
    forward outputs.
    """
    from .model import build_model

    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)

    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(
            f"bad magic: expected {MAGIC!r}, got {blob[:len(MAGIC)]!r}")
    r.offset = len(MAGIC)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}, "
                                     f"this build reads version {VERSION}")
    stored_fp = r.take(32, "fingerprint")
    expected_fp = config.fingerprint()
    if stored_fp != expected_fp:
        raise CheckpointFingerprintError(
            f"config fingerprint mismatch: checkpoint has {stored_fp.hex()}, "
            f"supplied config gives {expected_fp.hex()}")

    count = r.u32("record count")
    records = {}
    order = []
    for i in range(count):
        name_len = r.u32(f"record {i} name length")
        if name_len > 4096:
            raise CheckpointFormatError(f"record {i} name length {name_len} is implausible")
        name = r.take(name_len, f"record {i} name").decode()
        ndim = r.u32(f"record {i} ndim")
        if ndim > 8:
            raise CheckpointFormatError(f"record {i} ({name}) has ndim {ndim}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"record {i} shape"))
        n_elements = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = r.take(4 * n_elements, f"record {i} ({name}) data")
        records[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
        order.append(name)
    if r.offset != len(blob):
        raise CheckpointFormatError(
            f"{len(blob) - r.offset} trailing bytes after the last record")

    model = build_model(config)
    model_params = dict(model.named_parameters())
    missing = sorted(set(model_params) - set(records))
    extra = sorted(set(records) - set(model_params))
    if missing or extra:
        raise CheckpointFormatError(
            f"parameter names do not match the config: missing {missing}, unexpected {extra}")
    for name in order:
        p = model_params[name]
        if records[name].shape != p.data.shape:
            raise CheckpointFormatError(
                f"parameter {name!r} has shape {records[name].shape} on disk, "
                f"model expects {p.data.shape}")
        p.data = records[name].astype(np.float32)
        p.grad = np.zeros_like(p.data)
    return model
