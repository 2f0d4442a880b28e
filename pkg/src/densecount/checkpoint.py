"""Binary container for named float64 tensors, shared repo-wide.

Layout, all little-endian:

    magic "ASPD" | format version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | extents u32 each
               | raw 64-bit floats, row-major

Entries are written in sorted-name order so identical contents always
produce identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"ASPD"
FORMAT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(named))]
    for name in sorted(named):
        arr = np.asarray(named[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: not a tensor checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    if pos != len(data):
        raise ContractError(f"{path}: trailing bytes after last entry")
    return out
