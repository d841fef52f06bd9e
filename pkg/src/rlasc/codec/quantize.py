from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ..core import Tensor, ops

NUM_LEVELS = 6
DEFAULT_SIGMA = 10.0


@dataclass(frozen=True)
class QuantizerSpec:
    """Level q selects a codebook of 2**q centres spread uniformly over [-1, 1]."""

    level: int
    sigma: float = DEFAULT_SIGMA
    num_levels: int = NUM_LEVELS

    def __post_init__(self):
        if not 1 <= self.level <= self.num_levels:
            raise ValueError(f"level must be in 1..{self.num_levels}, got {self.level}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @cached_property
    def centers(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, 2 ** self.level)

    @property
    def spacing(self) -> float:
        return 2.0 / (2 ** self.level - 1)


def quantize_hard(f, spec: QuantizerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre assignment after clipping to [-1, 1]; ties take the lower index.

    Returns the dequantised values and the integer centre indices.
    """
    x = np.clip(np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64), -1.0, 1.0)
    c = spec.centers
    # argmin keeps the first (lower) index on exact ties
    symbols = np.abs(x[..., None] - c).argmin(axis=-1)
    return c[symbols], symbols


def dequantize(symbols: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    return spec.centers[np.asarray(symbols)]


def quantize_soft(f, spec: QuantizerSpec) -> Tensor:
    """Softmax(-sigma * |f - l_t|)-weighted average of the centres; differentiable."""
    f = ops.as_tensor(f)
    c = spec.centers
    dist = ops.tabs(ops.sub(f.reshape(*f.shape, 1), c))
    weights = ops.softmax(ops.mul(dist, -spec.sigma), axis=-1)
    return ops.mul(weights, c).sum(axis=-1)


def quantize_ste(f, spec: QuantizerSpec) -> Tensor:
    """Hard values in the forward pass, soft-quantiser gradient in the backward pass."""
    f = ops.clip(ops.as_tensor(f), -1.0, 1.0)
    soft = quantize_soft(f, spec)
    hard, _ = quantize_hard(f.data, spec)
    return soft + ops.detach(ops.as_tensor(hard) - soft)
