"""Model checkpoint file.

Layout (little endian): magic `TADW`, version u32, then until EOF one block per
parameter: name length u16, UTF-8 name, rank u8, rank x u32 dims, f32 data.
"""

from __future__ import annotations

import logging
import math
import struct

from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import BadMagicError, FormatError, ShapeError, TruncatedPayloadError, UnsupportedVersionError
from .helpers import atomic_write_bytes
from .layers import Module


logger = logging.getLogger(__name__)

MAGIC = b"TADW"
VERSION = 1


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, array in arrays.items():
        raw_name = name.encode("utf-8")
        data = np.asarray(array, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data).tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload: bytes, source: object = "<bytes>") -> Dict[str, np.ndarray]:
    if payload[:4] != MAGIC:
        raise BadMagicError(f"{source}: expected magic {MAGIC!r}, got {payload[:4]!r}")
    if len(payload) < 8:
        raise TruncatedPayloadError(source, 8, len(payload))
    (version,) = struct.unpack_from("<I", payload, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: checkpoint version {version} is not supported (expected {VERSION})")

    arrays: Dict[str, np.ndarray] = {}
    offset = 8

    def need(count: int) -> None:
        if offset + count > len(payload):
            raise TruncatedPayloadError(source, offset + count, len(payload))

    while offset < len(payload):
        need(2)
        (name_len,) = struct.unpack_from("<H", payload, offset)
        offset += 2
        need(name_len + 1)
        try:
            name = payload[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: parameter name at byte {offset} is not UTF-8") from exc
        offset += name_len
        (rank,) = struct.unpack_from("<B", payload, offset)
        offset += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", payload, offset)
        offset += 4 * rank
        size = 4 * math.prod(dims)
        need(size)
        if name in arrays:
            raise FormatError(f"{source}: duplicate parameter block {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).reshape(dims).copy()
        offset += size
    return arrays


def save_checkpoint(model: Module, path: str | Path) -> Path:
    target = atomic_write_bytes(path, encode_checkpoint({n: p.data for n, p in model.named_parameters()}))
    logger.info("checkpoint written to %s", target)
    return target


def read_checkpoint(path: str | Path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes(), source=path)


def load_checkpoint(model: Module, path: str | Path) -> Module:
    """Copy every stored block into the parameter of the same name."""
    arrays = read_checkpoint(path)
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    if missing or unexpected:
        raise FormatError(f"{path}: parameter names do not match the model (missing={missing}, unexpected={unexpected})")
    for name, param in params.items():
        if arrays[name].shape != param.shape:
            raise ShapeError(f"{path}: {name} has shape {arrays[name].shape}, model expects {param.shape}")
        param.data = arrays[name].astype(np.float64)
        param.grad = np.zeros_like(param.data)
    logger.info("checkpoint loaded from %s (%d parameters)", path, len(params))
    return model
