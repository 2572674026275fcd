"""Deterministic text output: 17-significant-digit JSON and FNV-1a digests."""

import json
import math

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def tensor_digest(*arrays) -> str:
    """FNV-1a 64-bit digest of the little-endian C-order byte stream of ``arrays``."""
    h = FNV_OFFSET
    for a in arrays:
        a = np.ascontiguousarray(a)
        buf = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        for b in buf:
            h = ((h ^ b) * FNV_PRIME) & _MASK
    return f"{h:016x}"


def fmt17(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    s = format(float(x), ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def dumps17(obj) -> str:
    """Compact JSON where every float carries 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt17(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps17(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ",".join(f"{dumps17(str(k))}:{dumps17(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps17(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def derive_seed(seed: int, *keys: int) -> int:
    """Independent 64-bit sub-seed for the path ``keys`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK, spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])

