"""Bjontegaard deltas between two rate/quality curves."""
from __future__ import annotations

import numpy as np


def _avg_poly_diff(x_a, y_a, x_b, y_b) -> float:
    """Mean of fit_b - fit_a over the shared x interval, cubic least-squares fits."""
    lo = max(np.min(x_a), np.min(x_b))
    hi = min(np.max(x_a), np.max(x_b))
    if not hi > lo:
        raise ValueError("curves do not overlap")
    pa = np.polyint(np.polyfit(x_a, y_a, 3))
    pb = np.polyint(np.polyfit(x_b, y_b, 3))
    area_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    area_b = np.polyval(pb, hi) - np.polyval(pb, lo)
    return float((area_b - area_a) / (hi - lo))


def _check(rate, quality) -> tuple[np.ndarray, np.ndarray]:
    rate = np.asarray(rate, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if rate.shape != quality.shape or rate.ndim != 1:
        raise ValueError("rate and quality must be 1-d arrays of equal length")
    if len(rate) < 4:
        raise ValueError(f"need at least 4 points, got {len(rate)}")
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    if len(np.unique(rate)) != len(rate):
        raise ValueError("rates must be distinct")
    return rate, quality


def bd_metric(curve_a, curve_b, mode: str = "bd-rate") -> float:
    """Curve b relative to curve a; each curve is (rates, qualities).

    ``bd-rate`` is the average rate change in percent at equal quality,
    ``bd-quality`` the average quality change at equal rate.
    """
    ra, qa = _check(*curve_a)
    rb, qb = _check(*curve_b)
    la, lb = np.log10(ra), np.log10(rb)
    if mode == "bd-quality":
        return _avg_poly_diff(la, qa, lb, qb)
    if mode == "bd-rate":
        if len(np.unique(qa)) < 4 or len(np.unique(qb)) < 4:
            raise ValueError("bd-rate needs at least 4 distinct quality values per curve")
        return (10.0 ** _avg_poly_diff(qa, la, qb, lb) - 1.0) * 100.0
    raise ValueError(f"mode must be 'bd-rate' or 'bd-quality', got {mode!r}")
