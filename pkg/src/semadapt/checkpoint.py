"""Binary checkpoints of named float32 arrays.

Layout (all integers unsigned 32-bit little-endian)::

    b"SEMA1" | count | { name_len | name (utf-8) | rank | dim_0 .. dim_{rank-1} | float32 payload } * count | crc32

The trailing CRC-32 covers the concatenated payload bytes of every entry.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SEMA1"
_U32 = struct.Struct("<I")


class CheckpointError(Exception):
    pass


def bundle_state(bundle) -> dict:
    """Parameters and spectral-norm vectors of a bundle (or any object with the two iterators)."""
    state = {name: p.data for name, p in bundle.named_parameters()}
    state.update((name, buf.u) for name, buf in bundle.named_buffers())
    return state


def encode_checkpoint(state: dict) -> bytes:
    parts = [MAGIC, _U32.pack(len(state))]
    crc = 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(payload)
        crc = zlib.crc32(payload, crc)
    parts.append(_U32.pack(crc))
    return b"".join(parts)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> dict:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def u32():
        nonlocal pos
        if pos + 4 > len(blob):
            raise CheckpointError(f"{source}: truncated")
        (v,) = _U32.unpack_from(blob, pos)
        pos += 4
        return v

    state, crc = {}, 0
    for _ in range(u32()):
        n = u32()
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        payload = blob[pos:pos + nbytes]
        if len(payload) != nbytes:
            raise CheckpointError(f"{source}: truncated payload for {name}")
        pos += nbytes
        crc = zlib.crc32(payload, crc)
        state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    stored = u32()
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    if stored != crc:
        raise CheckpointError(f"{source}: checksum mismatch (stored {stored:#010x}, computed {crc:#010x})")
    return state


def save_checkpoint(path, state_or_bundle) -> Path:
    """Write atomically (temp file then rename)."""
    state = state_or_bundle if isinstance(state_or_bundle, dict) else bundle_state(state_or_bundle)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    return decode_checkpoint(path.read_bytes(), str(path))


def load_into(bundle, state: dict, strict: bool = True) -> None:
    """Copy arrays into a bundle built with the same architecture."""
    targets = {name: p.data for name, p in bundle.named_parameters()}
    buffers = dict(bundle.named_buffers())
    targets.update((name, buf.u) for name, buf in buffers.items())
    missing = sorted(set(targets) - set(state))
    unexpected = sorted(set(state) - set(targets))
    if strict and (missing or unexpected):
        raise CheckpointError(f"architecture mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, dst in targets.items():
        if name not in state:
            continue
        src = state[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{name}: shape {src.shape} in checkpoint, {dst.shape} in model")
        if name in buffers:
            buffers[name].u = src.copy()
        else:
            dst[...] = src
