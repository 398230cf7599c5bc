"""
Checkpoint persistence.

Little-endian layout:

    magic "STBL" | u32 version | u32 len + model config JSON
    u32 epoch | f64 validation score
    u32 tensor count | tensors
    u8 has optimizer | [f64 lr | f64 momentum | u32 count | tensors]

Each tensor is u16 name length, UTF-8 name, u8 dtype code, u8 requires_grad,
u8 rank, rank x u32 extents, raw little-endian payload.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from app.errors import CheckpointError
from app.nn import ModelConfig, ModelParams
from app.optim import OptimizerState
from app.tensor import Tensor

# Configure logging
logger = logging.getLogger(__name__)

MAGIC = b"STBL"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class Checkpoint:
    model: ModelParams
    epoch: int
    val_score: float
    optimizer: Optional[OptimizerState] = None


def _pack_tensor(name: str, data: np.ndarray, requires_grad: bool) -> bytes:
    codes = {dtype: code for code, dtype in DTYPE_CODES.items()}
    dtype = data.dtype.newbyteorder("<")
    if dtype not in codes:
        raise CheckpointError(f"cannot store {name} with dtype {data.dtype}")
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded
    header += struct.pack("<BBB", codes[dtype], int(requires_grad), data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + np.ascontiguousarray(data, dtype=dtype).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    config = ckpt.model.config.model_dump_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(config)), config]
    parts.append(struct.pack("<Id", ckpt.epoch, ckpt.val_score))
    parts.append(struct.pack("<I", len(ckpt.model.tensors)))
    parts.extend(_pack_tensor(name, t.data, t.requires_grad) for name, t in ckpt.model.tensors.items())
    if ckpt.optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        opt = ckpt.optimizer
        parts.append(struct.pack("<BddI", 1, opt.lr, opt.momentum, len(opt.velocities)))
        parts.extend(_pack_tensor(name, v, False) for name, v in opt.velocities.items())
    return b"".join(parts)


class _Reader:
    """Sequential reader that reports the failing field and byte offset."""

    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.source = source
        self.offset = 0

    def fail(self, message: str) -> CheckpointError:
        return CheckpointError(f"{self.source}: {message} at byte {self.offset}")

    def take(self, count: int, field: str) -> bytes:
        if self.offset + count > len(self.raw):
            raise self.fail(f"truncated {field}: need {count} bytes, {len(self.raw) - self.offset} left")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, field: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def tensor(self) -> Tuple[str, np.ndarray, bool]:
        (length,) = self.unpack("<H", "tensor name length")
        try:
            name = self.take(length, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise self.fail(f"tensor name is not UTF-8 ({e})")
        code, requires_grad, rank = self.unpack("<BBB", f"header of {name}")
        if code not in DTYPE_CODES:
            raise self.fail(f"unknown dtype code {code} for {name}")
        shape = self.unpack(f"<{rank}I", f"shape of {name}")
        dtype = DTYPE_CODES[code]
        payload = self.take(int(np.prod(shape)) * dtype.itemsize, f"payload of {name}")
        data = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        return name, data, bool(requires_grad)


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(raw, source)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        reader.offset = 0
        raise reader.fail(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        reader.offset -= 4
        raise reader.fail(f"unsupported version {version}, expected {VERSION}")
    (length,) = reader.unpack("<I", "model config length")
    start = reader.offset
    try:
        config = ModelConfig.model_validate(json.loads(reader.take(length, "model config")))
    except (ValueError, ValidationError) as e:
        reader.offset = start
        raise reader.fail(f"invalid model config: {type(e).__name__} - {e}")
    epoch, val_score = reader.unpack("<Id", "epoch and validation score")
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        name, data, requires_grad = reader.tensor()
        tensors[name] = Tensor(data, requires_grad=requires_grad)

    (has_optimizer,) = reader.unpack("<B", "optimizer flag")
    optimizer = None
    if has_optimizer:
        lr, momentum, velocity_count = reader.unpack("<ddI", "optimizer header")
        velocities = {}
        for _ in range(velocity_count):
            name, data, _ = reader.tensor()
            if name not in tensors or tensors[name].shape != data.shape:
                raise reader.fail(f"velocity {name} does not mirror a parameter")
            velocities[name] = data
        optimizer = OptimizerState(lr=lr, momentum=momentum, velocities=velocities)
    if reader.offset != len(raw):
        raise reader.fail(f"{len(raw) - reader.offset} trailing bytes")
    return Checkpoint(ModelParams(config=config, tensors=tensors), epoch, val_score, optimizer)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    """Write a checkpoint; the file appears atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)
    logger.debug(f"Saved checkpoint {path} (epoch {ckpt.epoch})")


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({type(e).__name__} - {e})") from e
    return decode(raw, str(path))
