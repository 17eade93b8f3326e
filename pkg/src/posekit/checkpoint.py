"""Flat binary checkpoint format for named float64 parameter blocks.

Layout (all integers little-endian):

    magic   4 bytes  b"PKPT"
    version uint32   currently 1
    count   uint32   number of blocks
    then per block, in ascending name order:
      name_len uint16, name utf-8 bytes,
      ndim     uint8,  dims uint32 * ndim,
      data     float64 little-endian, C order

The ordering makes serialization canonical: the same blocks always produce
the same bytes.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import SchemaError

MAGIC = b"PKPT"
VERSION = 1


def save_checkpoint(blocks: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SchemaError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise SchemaError("not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * n_items)
        blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise SchemaError(f"{len(data) - r.pos} trailing bytes after last block")
    return blocks


def save_checkpoint_file(path, blocks: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(blocks))


def load_checkpoint_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
