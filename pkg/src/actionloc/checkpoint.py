"""Flat binary checkpoint container for named parameter arrays.

Layout (little-endian throughout):

    magic   4 bytes  b"CGMG"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        path_len u16
        path     utf-8 bytes
        rank     u8
        dims     u32 per rank
        payload  float32 values, C order

Values are stored in 32-bit floats regardless of the in-memory precision:
the container is a storage format, not an exact-arithmetic dump.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGMG"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_params(path: str | Path, params: dict[str, np.ndarray]) -> None:
    """Write parameters in insertion order (deterministic for a fixed build)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(params))
    for name, arr in params.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"parameter path too long: {name!r}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays keyed by path."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (path_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + path_len].decode("utf-8")
            offset += path_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt entry: {exc}") from exc
        if data.size != n:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        params[name] = data.astype(np.float64).reshape(dims)
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return params


def check_compatible(loaded: dict[str, np.ndarray], expected: dict[str, np.ndarray]) -> None:
    """Reject checkpoints whose paths or shapes disagree with the model."""
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    problems = []
    if missing:
        problems.append(f"missing parameters: {', '.join(missing[:5])}"
                        + (" ..." if len(missing) > 5 else ""))
    if extra:
        problems.append(f"unexpected parameters: {', '.join(extra[:5])}"
                        + (" ..." if len(extra) > 5 else ""))
    for name in expected:
        if name in loaded and loaded[name].shape != expected[name].shape:
            problems.append(f"{name}: shape {loaded[name].shape}, model expects {expected[name].shape}")
    if problems:
        raise CheckpointError("checkpoint/config mismatch: " + "; ".join(problems))
