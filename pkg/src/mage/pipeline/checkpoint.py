"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MAGE" | u32 version | u64 meta_len | meta (UTF-8 JSON, sorted keys)
    u32 n_tensors
    n_tensors x [u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 dim | payload]
    b"END!"

dtype 0 is float32, 1 is int64. Tensors are written in sorted name order so
equal states serialise to equal bytes.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MAGE"
TRAILER = b"END!"
VERSION = 1
_DTYPES = {0: (torch.float32, np.dtype("<f4")), 1: (torch.int64, np.dtype("<i8"))}
_CODES = {torch.float32: 0, torch.int64: 1}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC + struct.pack("<IQ", VERSION, len(meta)) + meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach()
        if t.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        code = _CODES[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.cpu().numpy(), dtype=_DTYPES[code][1]).tobytes())
    buf.write(TRAILER)
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("corrupt checkpoint: truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version, meta_len = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"corrupt checkpoint: dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        tdtype, ndtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * ndtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=ndtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(ndtype.newbyteorder("="), copy=True))
    if bytes(take(4)) != TRAILER or pos != len(view):
        raise CheckpointError("corrupt checkpoint: bad trailer")
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    """Write atomically: a crash mid-write leaves the old file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return from_bytes(data)


def module_tensors(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor]):
    own = module.state_dict()
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise CheckpointError(f"tensor table mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(tensors[k].shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(v.shape)}")
    module.load_state_dict(tensors)
