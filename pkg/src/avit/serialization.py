"""Binary container for named arrays.

Layout (all integers little-endian)::

    magic     8 bytes   b"AVITCKPT"
    version   u32
    count     u32
    count x record:
        name_len u32, name (UTF-8)
        dtype    u8   (1=f32, 2=f64, 3=i64, 4=u8)
        flags    u8   (bit 0: trainable)
        ndim     u32, dims u32[ndim]
        values   raw little-endian, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"AVITCKPT"
CHECKPOINT_VERSION = 1

DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {(dt.kind, dt.itemsize): tag for tag, dt in DTYPE_TAGS.items()}

FLAG_TRAINABLE = 1


@dataclass
class Record:
    name: str
    values: np.ndarray
    flags: int = 0

    @property
    def trainable(self) -> bool:
        return bool(self.flags & FLAG_TRAINABLE)


def dtype_tag(dtype) -> int:
    dt = np.dtype(dtype)
    tag = _TAG_OF.get((dt.kind, dt.itemsize))
    if tag is None:
        raise FormatError(f"unsupported dtype {dt}")
    return tag


def encode_records(records: list[Record], magic: bytes = CHECKPOINT_MAGIC,
                   version: int = CHECKPOINT_VERSION) -> bytes:
    out = [magic, struct.pack("<II", version, len(records))]
    for rec in records:
        name = rec.name.encode("utf-8")
        tag = dtype_tag(rec.values.dtype)
        arr = np.asarray(rec.values, dtype=DTYPE_TAGS[tag], order="C")
        out.append(struct.pack("<I", len(name)))
        out.append(name)
        out.append(struct.pack("<BBI", tag, rec.flags, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_records(buf: bytes, magic: bytes = CHECKPOINT_MAGIC,
                   version: int = CHECKPOINT_VERSION, source: str = "<bytes>") -> list[Record]:
    r = _Reader(buf, source)
    if r.take(len(magic)) != magic:
        raise FormatError(f"{source}: bad magic, expected {magic!r}")
    file_version, count = r.unpack("<II")
    if file_version != version:
        raise FormatError(f"{source}: unsupported version {file_version} (expected {version})")
    records = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{source}: record name is not UTF-8") from exc
        tag, flags, ndim = r.unpack("<BBI")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"{source}: record {name!r} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I")
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
        records.append(Record(name, values, flags))
    if r.pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.pos} trailing bytes after last record")
    return records


def save_records(path, records: list[Record]) -> None:
    Path(path).write_bytes(encode_records(records))


def load_records(path) -> list[Record]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_records(buf, source=str(path))
