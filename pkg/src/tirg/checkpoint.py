"""Flat parameter archive.

Layout (all integers little-endian):

    magic          9 bytes  b"TIRGCKPT1"
    record count   u32
    per record:
      name length  u16
      name         UTF-8 bytes
      ndim         u8
      extents      ndim x u32
      values       float32, row-major

Values are stored fp32 regardless of the in-memory training dtype.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from .autodiff import Parameter

MAGIC = b"TIRGCKPT1"

Record = Union[Parameter, Tuple[str, np.ndarray]]


def _as_records(params: Iterable[Record]):
    for item in params:
        if isinstance(item, Parameter):
            yield item.name, item.data
        else:
            name, arr = item
            yield name, np.asarray(arr)


def save_checkpoint(params: Iterable[Record], path: Union[str, Path]) -> None:
    records = list(_as_records(params))
    names = [name for name, _ in records]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate parameter names: {dupes}")
    chunks = [MAGIC, struct.pack("<I", len(records))]
    for name, arr in records:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint archive")
    (count,) = struct.unpack("<I", reader.take(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", reader.take(1))
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        values = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        if name in out:
            raise ValueError(f"duplicate parameter name in checkpoint: {name!r}")
        out[name] = values.copy()
    if reader.pos != len(reader.blob):
        raise ValueError("checkpoint has trailing bytes")
    return out


def assign_parameters(params: Sequence[Parameter], state: Dict[str, np.ndarray]) -> None:
    """Load a checkpoint dict into live Parameters; names and shapes must match exactly."""
    by_name = {p.name: p for p in params}
    missing = sorted(set(by_name) - set(state))
    if missing:
        raise ValueError(f"checkpoint missing parameters: {missing}")
    unexpected = sorted(set(state) - set(by_name))
    if unexpected:
        raise ValueError(f"checkpoint has unexpected parameters: {unexpected}")
    for name, p in by_name.items():
        arr = state[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise ValueError(
                f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
    for name, p in by_name.items():
        p.data = state[name].astype(p.data.dtype).copy()
        p.grad = None
