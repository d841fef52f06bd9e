"""Canonical Huffman coding over small integer alphabets.

Tables are stored as code lengths only; codewords are reassigned
canonically (shorter first, then by symbol) so encoder and decoder agree.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np


@dataclass
class HuffmanTable:
    lengths: dict[int, int]
    codes: dict[int, int] = field(init=False)

    def __post_init__(self):
        if not self.lengths:
            raise ValueError("empty Huffman table")
        self.codes = canonical_codes(self.lengths)
        self._decode = {(self.lengths[s], c): s for s, c in self.codes.items()}
        self.max_length = max(self.lengths.values())
        self._bits = {s: _int_to_bits(c, self.lengths[s]) for s, c in self.codes.items()}

    @property
    def symbols(self) -> list[int]:
        return sorted(self.lengths)

    def kraft_sum(self) -> float:
        return sum(2.0 ** -l for l in self.lengths.values())

    def bits_for(self, symbol: int) -> np.ndarray:
        return self._bits[symbol]

    def lookup(self, length: int, code: int) -> int | None:
        return self._decode.get((length, code))

    def coded_length(self, symbols) -> int:
        syms, counts = np.unique(np.asarray(symbols).ravel(), return_counts=True)
        try:
            return int(sum(self.lengths[int(s)] * int(c) for s, c in zip(syms, counts)))
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]} not in table") from None

    def pairs(self) -> list[tuple[int, int]]:
        return [(s, self.lengths[s]) for s in self.symbols]


def _int_to_bits(value: int, length: int) -> np.ndarray:
    return np.array([(value >> (length - 1 - i)) & 1 for i in range(length)], dtype=np.uint8)


def canonical_codes(lengths: dict[int, int]) -> dict[int, int]:
    codes, code, prev = {}, 0, 0
    for sym in sorted(lengths, key=lambda s: (lengths[s], s)):
        code <<= lengths[sym] - prev
        codes[sym] = code
        code += 1
        prev = lengths[sym]
    return codes


def code_lengths(freqs: dict[int, int]) -> dict[int, int]:
    """Huffman code lengths for a frequency table; one symbol gets length 1."""
    if not freqs:
        raise ValueError("need at least one symbol")
    if len(freqs) == 1:
        return {next(iter(freqs)): 1}
    tie = itertools.count()
    heap = [(f, next(tie), [s]) for s, f in sorted(freqs.items())]
    heapq.heapify(heap)
    depth = dict.fromkeys(freqs, 0)
    while len(heap) > 1:
        f1, _, s1 = heapq.heappop(heap)
        f2, _, s2 = heapq.heappop(heap)
        for s in s1 + s2:
            depth[s] += 1
        heapq.heappush(heap, (f1 + f2, next(tie), s1 + s2))
    return depth


def huffman_build(symbols) -> HuffmanTable:
    arr = np.asarray(symbols).ravel()
    if arr.size == 0:
        raise ValueError("need at least one symbol")
    syms, counts = np.unique(arr, return_counts=True)
    return HuffmanTable(code_lengths({int(s): int(c) for s, c in zip(syms, counts)}))


def huffman_encode(symbols, table: HuffmanTable) -> np.ndarray:
    """Concatenated canonical codewords, MSB first, as a uint8 0/1 array."""
    arr = np.asarray(symbols).ravel()
    if arr.size == 0:
        return np.zeros(0, dtype=np.uint8)
    try:
        return np.concatenate([table.bits_for(int(s)) for s in arr])
    except KeyError as e:
        raise ValueError(f"symbol {e.args[0]} not in Huffman table") from None


@dataclass
class DecodeResult:
    symbols: np.ndarray
    corrupted: bool


def huffman_decode(bits, table: HuffmanTable, count: int) -> DecodeResult:
    """Decode ``count`` symbols; damaged input never raises.

    An invalid codeword decodes as index 0 and decoding resumes at the next
    bit. Running out of bits pads with index 0. Either case, or leftover
    bits after ``count`` symbols, sets ``corrupted``.
    """
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    out = np.zeros(count, dtype=np.int64)
    corrupted = False
    pos, k, n = 0, 0, len(bits)
    while k < count:
        code, length, sym = 0, 0, None
        while pos < n:
            code = (code << 1) | int(bits[pos])
            pos += 1
            length += 1
            sym = table.lookup(length, code)
            if sym is not None or length >= table.max_length:
                break
        if sym is None:
            corrupted = True
            if pos >= n and length < table.max_length:
                break  # budget exhausted mid-codeword
            sym = 0
        out[k] = sym
        k += 1
    if k < count or pos != n:
        corrupted = True
    return DecodeResult(out, corrupted)


def empirical_entropy(symbols) -> float:
    _, counts = np.unique(np.asarray(symbols).ravel(), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())
