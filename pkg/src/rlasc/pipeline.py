"""Image <-> semantic bitstream, using a trained CodecModel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import (
    NUM_LEVELS,
    ConceptSegment,
    QuantizerSpec,
    SemanticBitstream,
    decode_label_map,
    dequantize,
    encode_label_map,
    huffman_build,
    huffman_decode,
    huffman_encode,
    label_bits_length,
    quantize_hard,
)
from .decoder import CodecModel
from .semantic import PATCH, downscale_labels

_SPECS = {q: QuantizerSpec(q) for q in range(1, NUM_LEVELS + 1)}


def spec_for(level: int) -> QuantizerSpec:
    return _SPECS[level]


@dataclass
class Analysis:
    """Everything the encoder side knows about one image."""

    features: np.ndarray       # cells x n, unquantised
    labels: np.ndarray         # H x W
    cell_labels: np.ndarray    # h x w
    h: int
    w: int

    @property
    def n(self) -> int:
        return self.features.shape[1]

    def concept_map(self, m: int) -> np.ndarray:
        """f^(m) as an n x h x w array, zero off the class-m cells."""
        fmap = self.features.T.reshape(self.n, self.h, self.w)
        return fmap * (self.cell_labels == m)[None]


def analyze(model: CodecModel, image: np.ndarray, labels: np.ndarray) -> Analysis:
    feats = model.encode(image).data
    H, W = labels.shape
    return Analysis(feats, np.asarray(labels), downscale_labels(labels, model.M),
                    H // PATCH, W // PATCH)


def concept_bits(analysis: Analysis, m: int, level: int) -> int:
    """Payload length of concept m at ``level`` without materialising the bits."""
    _, symbols = quantize_hard(analysis.concept_map(m), spec_for(level))
    return huffman_build(symbols).coded_length(symbols)


def quantized_cells(analysis: Analysis, levels) -> np.ndarray:
    """Decoder input: each cell quantised at the level of its own class."""
    out = np.zeros_like(analysis.features)
    flat = analysis.cell_labels.ravel()
    for m, q in enumerate(levels, start=1):
        sel = flat == m
        if sel.any():
            out[sel] = quantize_hard(analysis.features[sel], spec_for(q))[0]
    return out


def encode_image(model: CodecModel, image: np.ndarray, labels: np.ndarray,
                 levels) -> SemanticBitstream:
    levels = list(levels)
    if len(levels) != model.M:
        raise ValueError(f"need {model.M} levels, got {len(levels)}")
    a = analyze(model, image, labels)
    segments = []
    for m, q in enumerate(levels, start=1):
        _, symbols = quantize_hard(a.concept_map(m), spec_for(q))
        table = huffman_build(symbols)
        segments.append(ConceptSegment(m, int(q), table, huffman_encode(symbols, table)))
    return SemanticBitstream(model.M, a.n, a.w, a.h, NUM_LEVELS, segments,
                             encode_label_map(labels))


@dataclass
class Decoded:
    image: np.ndarray
    labels: np.ndarray
    fhat_cells: np.ndarray
    corrupted_segments: list[int]
    label_map_damaged: bool


def decode_bitstream(model: CodecModel, bs: SemanticBitstream) -> Decoded:
    H, W = bs.H, bs.W
    labels, damaged = decode_label_map(bs.label_entries, (H, W), bs.M)
    cells = downscale_labels(labels, bs.M)
    fmap = np.zeros((bs.n, bs.h, bs.w))
    corrupted = []
    for seg in bs.segments:
        res = huffman_decode(seg.payload, seg.table, bs.n * bs.h * bs.w)
        if res.corrupted:
            corrupted.append(seg.class_id)
        spec = spec_for(seg.level)
        symbols = np.clip(res.symbols, 0, len(spec.centers) - 1)
        values = dequantize(symbols, spec).reshape(bs.n, bs.h, bs.w)
        fmap += values * (cells == seg.class_id)[None]
    fhat = fmap.reshape(bs.n, -1).T
    image = model.reconstruct(fhat, cells)
    return Decoded(image, labels, fhat, corrupted, damaged)


def stream_rate_bits(bs: SemanticBitstream) -> int:
    return label_bits_length(bs.label_entries) + bs.payload_bits()
