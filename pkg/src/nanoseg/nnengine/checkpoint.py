"""Flat binary tensor container used for model checkpoints.

Layout: 5-byte magic ``NSEG1`` followed by records until end of file.
Each record is a u64 little-endian name length, the UTF-8 name, a u64
rank, ``rank`` u64 dimensions and the row-major float64 little-endian
payload. Rank 0 carries exactly one value.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NSEG1"


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray | float]) -> None:
    """Write named float64 arrays (or scalars) in dictionary order."""
    chunks = [MAGIC]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(
                f"{self.path}: truncated while reading {what} at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as name -> float64 array, in file order."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    out: dict[str, np.ndarray] = {}
    while reader.pos < len(reader.data):
        name_len = reader.u64("name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: record name is not UTF-8") from exc
        rank = reader.u64(f"rank of {name!r}")
        shape = tuple(reader.u64(f"dimension of {name!r}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = reader.take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise CheckpointFormatError(f"{path}: duplicate record {name!r}")
        out[name] = arr
    return out
