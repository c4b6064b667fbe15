"""Binary checkpoint format.

All integers are little-endian u32; values are little-endian float32::

    b"MSAW" | version | tensor count
    per tensor: name length | name (utf-8) | rank | extents... | values
    CRC32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .nn import Module

MAGIC = b"MSAW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: truncated or malformed tensor record ({exc})") from None
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path: Union[str, os.PathLike], model_or_tensors) -> bytes:
    tensors = model_or_tensors.state_dict() if isinstance(model_or_tensors, Module) else model_or_tensors
    data = encode(tensors)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path: Union[str, os.PathLike]) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: checkpoint not found")
    return decode(p.read_bytes(), str(p))


def apply_checkpoint(model: Module, tensors: Mapping[str, np.ndarray]) -> None:
    """Copy checkpoint values into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    missing = [n for n in params if n not in tensors]
    extra = [n for n in tensors if n not in params]
    if missing or extra:
        raise CheckpointError(
            "checkpoint does not match the configured model: "
            f"missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''} "
            "(check module toggles and backbone blocks)"
        )
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, configured model expects {p.shape} "
                "(width mismatch between checkpoint and config)"
            )
    for name, p in params.items():
        p.value = tensors[name].astype(p.dtype)


def checkpoint_crc(path: Union[str, os.PathLike]) -> int:
    (crc,) = struct.unpack("<I", Path(path).read_bytes()[-4:])
    return crc
