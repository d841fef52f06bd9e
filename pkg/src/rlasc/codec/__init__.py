from .bitstream import (
    BitstreamError,
    ConceptSegment,
    SemanticBitstream,
    deserialize,
    overhead_bits,
    rate_psi,
    serialize,
)
from .huffman import (
    DecodeResult,
    HuffmanTable,
    code_lengths,
    empirical_entropy,
    huffman_build,
    huffman_decode,
    huffman_encode,
)
from .quantize import (
    DEFAULT_SIGMA,
    NUM_LEVELS,
    QuantizerSpec,
    dequantize,
    quantize_hard,
    quantize_soft,
    quantize_ste,
)
from .rle import decode_label_map, encode_label_map, label_bits_length

__all__ = [
    "BitstreamError", "ConceptSegment", "DEFAULT_SIGMA", "DecodeResult", "HuffmanTable",
    "NUM_LEVELS", "QuantizerSpec", "SemanticBitstream", "code_lengths", "decode_label_map",
    "dequantize", "deserialize", "empirical_entropy", "encode_label_map", "huffman_build",
    "huffman_decode", "huffman_encode", "label_bits_length", "overhead_bits",
    "quantize_hard", "quantize_ste", "quantize_soft", "rate_psi", "serialize",
]
