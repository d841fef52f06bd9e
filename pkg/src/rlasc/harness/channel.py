"""BPSK over AWGN with hard decisions.

Header and Huffman tables are assumed to arrive intact; concept payloads and
the label-map entries go through the noisy channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..codec import ConceptSegment, SemanticBitstream
from ..codec.rle import bits_to_entries, entries_to_bits


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "lossless"
    snr_db: float | None = None
    protect_labels: bool = False

    def __post_init__(self):
        if self.kind not in ("lossless", "awgn"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "awgn" and (self.snr_db is None or not math.isfinite(self.snr_db)):
            raise ValueError("awgn channel needs a finite snr_db")


def noise_std(snr_db: float) -> float:
    return math.sqrt(1.0 / (2.0 * 10.0 ** (snr_db / 10.0)))


def bpsk_ber(snr_db: float) -> float:
    """Q(sqrt(2 * snr)) = erfc(sqrt(snr)) / 2."""
    return 0.5 * math.erfc(math.sqrt(10.0 ** (snr_db / 10.0)))


def awgn_transmit(bits, snr_db: float, gen: np.random.Generator) -> np.ndarray:
    """Send 0/1 bits as +1/-1 symbols, add Gaussian noise, slice at zero.

    Noise is drawn before scaling, so for a fixed generator state the set of
    flipped bits shrinks as the SNR grows.
    """
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    bits = np.asarray(bits, dtype=np.uint8)
    z = gen.standard_normal(bits.shape)
    x = 1.0 - 2.0 * bits
    y = x + noise_std(snr_db) * z
    return (y < 0).astype(np.uint8)


def transmit_bitstream(bs: SemanticBitstream, channel: ChannelSpec,
                       gen: np.random.Generator) -> SemanticBitstream:
    if channel.kind == "lossless":
        return bs
    parts = [seg.payload for seg in bs.segments]
    label_bits = None if channel.protect_labels else entries_to_bits(bs.label_entries)
    if label_bits is not None:
        parts.append(label_bits)
    sizes = [len(p) for p in parts]
    rx = awgn_transmit(np.concatenate(parts) if parts else np.zeros(0, np.uint8),
                       channel.snr_db, gen)
    chunks = np.split(rx, np.cumsum(sizes)[:-1])
    segments = [ConceptSegment(s.class_id, s.level, s.table, c)
                for s, c in zip(bs.segments, chunks)]
    entries = bs.label_entries if label_bits is None else bits_to_entries(chunks[-1])
    return replace(bs, segments=segments, label_entries=entries)
