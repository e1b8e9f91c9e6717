"""Weight checkpoint file format.

Layout (little-endian throughout):
    magic "MGWT" | version u8 | count u32
    per entry: name_len u16, UTF-8 name, rank u8, dims u32 x rank,
               raw float32 values (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"MGWT"
VERSION = 1


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name, arr in state.items():
        a = np.ascontiguousarray(arr, dtype=np.float32)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        chunks.append(a.astype("<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(state: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    ofs = 9
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, ofs)
        ofs += 2
        name = raw[ofs:ofs + nlen].decode("utf-8")
        ofs += nlen
        (rank,) = struct.unpack_from("<B", raw, ofs)
        ofs += 1
        dims = struct.unpack_from(f"<{rank}I", raw, ofs) if rank else ()
        ofs += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=ofs).reshape(dims)
        ofs += 4 * n
        state[name] = arr.copy()
    if ofs != len(raw):
        raise FormatError(f"{path}: {len(raw) - ofs} trailing bytes")
    return state


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; ties bitstreams to the checkpoint that wrote them."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def checkpoint_hash(path: str | Path) -> int:
    return fnv1a64(Path(path).read_bytes())
