"""The .rlsc container: header, one Huffman segment per concept, RLE label map.

All multi-byte integers are little-endian::

    "RLSC" | version u8 | M u16 | n u16 | w u16 | h u16 | Q u8
    per concept: level u8 | payload bits u32 | table size u16 |
                 (symbol u8, length u8) * size | payload bytes (MSB first, zero padded)
    label map:   entry count u32 | (class u8, run u16) * count
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .huffman import HuffmanTable
from .rle import ENTRY_BITS, label_bits_length

MAGIC = b"RLSC"
VERSION = 1
_HEADER = struct.Struct("<4sBHHHHB")
_SEG_HEAD = struct.Struct("<BIH")


class BitstreamError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ConceptSegment:
    class_id: int
    level: int
    table: HuffmanTable
    payload: np.ndarray     # uint8 0/1 bits

    @property
    def bit_length(self) -> int:
        return int(len(self.payload))

    def table_bits(self) -> int:
        return 16 * len(self.table.lengths)

    def __eq__(self, other):
        return (isinstance(other, ConceptSegment) and self.class_id == other.class_id
                and self.level == other.level
                and self.table.lengths == other.table.lengths
                and np.array_equal(self.payload, other.payload))


@dataclass
class SemanticBitstream:
    M: int
    n: int
    w: int
    h: int
    Q: int
    segments: list[ConceptSegment] = field(default_factory=list)
    label_entries: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @property
    def H(self) -> int:
        return self.h * 8

    @property
    def W(self) -> int:
        return self.w * 8

    def label_bits(self) -> int:
        return label_bits_length(self.label_entries)

    def payload_bits(self) -> int:
        return sum(s.bit_length for s in self.segments)

    def __eq__(self, other):
        return (isinstance(other, SemanticBitstream)
                and (self.M, self.n, self.w, self.h, self.Q)
                == (other.M, other.n, other.w, other.h, other.Q)
                and self.segments == other.segments
                and np.array_equal(self.label_entries, other.label_entries))


def serialize(bs: SemanticBitstream) -> bytes:
    if len(bs.segments) != bs.M:
        raise ValueError(f"expected {bs.M} segments, got {len(bs.segments)}")
    out = bytearray(_HEADER.pack(MAGIC, VERSION, bs.M, bs.n, bs.w, bs.h, bs.Q))
    for seg in bs.segments:
        pairs = seg.table.pairs()
        out += _SEG_HEAD.pack(seg.level, seg.bit_length, len(pairs))
        for sym, length in pairs:
            out += struct.pack("<BB", sym, length)
        out += np.packbits(seg.payload).tobytes()
    entries = np.asarray(bs.label_entries, dtype=np.int64).reshape(-1, 2)
    out += struct.pack("<I", len(entries))
    for cls, run in entries:
        out += struct.pack("<BH", int(cls), int(run))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise BitstreamError(f"truncated stream while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct | str, what: str):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def deserialize(data: bytes) -> SemanticBitstream:
    r = _Reader(data)
    if data[:4] != MAGIC:
        raise BitstreamError(f"bad magic {data[:4]!r}", 0)
    _, version, M, n, w, h, Q = r.unpack(_HEADER, "header")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}", 4)
    segments = []
    for m in range(1, M + 1):
        start = r.pos
        level, nbits, count = r.unpack(_SEG_HEAD, f"segment {m} header")
        if not 1 <= level <= Q:
            raise BitstreamError(f"segment {m}: level {level} outside 1..{Q}", start)
        lengths = {}
        for _ in range(count):
            sym, length = r.unpack("<BB", f"segment {m} table")
            lengths[sym] = length
        if not lengths:
            raise BitstreamError(f"segment {m}: empty Huffman table", start)
        raw = r.take((nbits + 7) // 8, f"segment {m} payload")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:nbits]
        segments.append(ConceptSegment(m, level, HuffmanTable(lengths), bits))
    (count,) = r.unpack("<I", "label-map count")
    raw = r.take(3 * count, "label-map entries")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int64)
    entries = np.stack([arr[:, 0], arr[:, 1] | (arr[:, 2] << 8)], axis=1)
    if r.pos != len(data):
        raise BitstreamError("trailing bytes after label map", r.pos)
    return SemanticBitstream(M, n, w, h, Q, segments, entries)


def rate_psi(bs: SemanticBitstream, H: int | None = None, W: int | None = None) -> float:
    """Bits per pixel of the label-map code plus every concept payload.

    Header, Huffman tables and byte padding are not counted; see
    :func:`overhead_bits`.
    """
    H = bs.H if H is None else H
    W = bs.W if W is None else W
    return (bs.label_bits() + bs.payload_bits()) / float(H * W)


def overhead_bits(bs: SemanticBitstream) -> int:
    """Serialized size in bits minus the bits counted by :func:`rate_psi`."""
    return 8 * len(serialize(bs)) - bs.label_bits() - bs.payload_bits()


__all__ = ["BitstreamError", "ConceptSegment", "SemanticBitstream", "deserialize",
           "overhead_bits", "rate_psi", "serialize", "ENTRY_BITS"]
