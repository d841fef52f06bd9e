"""Semantic, perceptual and rate terms and the composite criterion built from them."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import RngStream, Tensor, ops
from .semantic import TaskPrediction

DET_FLOOR = 1e-8
PSNR_CAP = 99.0
SSIM_WINDOW = 8
_GRAD_EPS = 1e-6


@dataclass(frozen=True)
class CriterionWeights:
    lam: float = 1.0
    eta: float = 10.0

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError(f"weights must be non-negative, got lam={self.lam}, eta={self.eta}")


@dataclass
class CriterionReport:
    rate: float
    semantic: float
    perceptual: float
    composite: float

    def as_dict(self) -> dict:
        return asdict(self)


# --- IoU family ----------------------------------------------------------
def iou(gt, pred) -> float:
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    union = np.count_nonzero(gt | pred)
    if union == 0:
        return 1.0
    return np.count_nonzero(gt & pred) / union


def class_ious(gt: TaskPrediction, recon: TaskPrediction, M: int | None = None) -> np.ndarray:
    a, b = np.asarray(gt.labels), np.asarray(recon.labels)
    if a.shape != b.shape:
        raise ValueError(f"label grids differ: {a.shape} vs {b.shape}")
    M = int(max(a.max(), b.max())) if M is None else M
    return np.array([iou(a == m, b == m) for m in range(1, M + 1)])


def mean_iou(gt: TaskPrediction, recon: TaskPrediction, M: int | None = None) -> float:
    return float(class_ious(gt, recon, M).mean())


def miou_loss(gt: TaskPrediction, recon: TaskPrediction, M: int | None = None) -> float:
    return 1.0 - mean_iou(gt, recon, M)


def det_loss(gt: TaskPrediction, recon: TaskPrediction, M: int | None = None) -> float:
    return float(-np.log(max(mean_iou(gt, recon, M), DET_FLOOR)))


# --- cross entropy -------------------------------------------------------
def target_distribution(y: int, M: int, eps: float = 0.0) -> np.ndarray:
    """One-hot of class ``y`` (1-based), or its label-smoothed version."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {eps}")
    p = np.full(M, eps / (M - 1) if M > 1 else 0.0)
    p[y - 1] = 1.0 - eps
    return p


def ce_loss(y: int, p_hat, eps: float = 0.0) -> float:
    """-(1/M) * sum_i p_i ln p_hat_i, natural log, with the 1/M factor kept."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if abs(p_hat.sum() - 1.0) > 1e-9 or np.any(p_hat < 0):
        raise ValueError(f"predicted probabilities must sum to 1 (sum={p_hat.sum()!r})")
    M = len(p_hat)
    p = target_distribution(y, M, eps)
    nz = p > 0
    with np.errstate(divide="ignore"):
        return float(-(p[nz] * np.log(p_hat[nz])).sum() / M)


# --- perceptual proxy ----------------------------------------------------
def _diff_matrix(size: int) -> np.ndarray:
    """Forward difference operator; the last position has no successor and stays 0."""
    d = np.zeros((size, size))
    idx = np.arange(size - 1)
    d[idx, idx] = -1.0
    d[idx + 1, idx] = 1.0
    return d


class PerceptualExtractor:
    """Frozen multi-scale feature map: RGB plus gradient magnitudes, projected to 8 channels.

    Scales are full, 1/2 and 1/4 resolution (2x2 average pooling). Each scale
    has its own seeded 8x5 projection.
    """

    in_channels = 5
    out_channels = 8
    num_scales = 3

    def __init__(self, seed: int = 0):
        gen = RngStream(seed, 0xFEA7).generator()
        self.seed = seed
        self.projections = [gen.normal(0.0, 1.0 / np.sqrt(self.in_channels),
                                       size=(self.out_channels, self.in_channels))
                            for _ in range(self.num_scales)]
        self._ops: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def _diffs(self, H: int, W: int):
        if (H, W) not in self._ops:
            self._ops[(H, W)] = (_diff_matrix(W), _diff_matrix(H).T)
        return self._ops[(H, W)]

    def _scale_features(self, x: Tensor, proj: np.ndarray) -> Tensor:
        _, H, W = x.shape
        dx, dy = self._diffs(H, W)
        gray = x.mean(axis=0)
        gx = ops.sqrt(ops.square(gray @ dx) + _GRAD_EPS)
        gy = ops.sqrt(ops.square(ops.matmul(dy, gray)) + _GRAD_EPS)
        stacked = ops.concat([x.reshape(3, H * W), gx.reshape(1, H * W),
                              gy.reshape(1, H * W)], axis=0)
        return ops.matmul(proj, stacked)

    def features(self, image) -> list[Tensor]:
        x = ops.as_tensor(image)
        feats = []
        for s, proj in enumerate(self.projections):
            if s:
                _, H, W = x.shape
                x = x.reshape(3, H // 2, 2, W // 2, 2).mean(axis=(2, 4))
            feats.append(self._scale_features(x, proj))
        return feats

    def descriptor(self, image) -> np.ndarray:
        """Per-image vector of spatially averaged features at every scale."""
        return np.concatenate([f.data.mean(axis=1) for f in self.features(image)])


def perceptual_loss_tensor(x, x_hat, extractor: PerceptualExtractor) -> Tensor:
    total = ops.as_tensor(0.0)
    for fa, fb in zip(extractor.features(x), extractor.features(x_hat)):
        total = total + ops.square(fa - fb).mean()
    return total


def perceptual_loss(x, x_hat, extractor: PerceptualExtractor) -> float:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    x_hat = np.asarray(x_hat.data if isinstance(x_hat, Tensor) else x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    return float(perceptual_loss_tensor(x, x_hat, extractor).data)


# --- composite -----------------------------------------------------------
def composite_loss(rate: float, semantic: float, perceptual: float,
                   weights: CriterionWeights = CriterionWeights()) -> float:
    return weights.lam * rate + semantic + weights.eta * perceptual


def make_report(rate: float, semantic: float, perceptual: float,
                weights: CriterionWeights = CriterionWeights()) -> CriterionReport:
    return CriterionReport(rate, semantic, perceptual,
                           composite_loss(rate, semantic, perceptual, weights))


# --- pixel metrics -------------------------------------------------------
def psnr(x, x_hat) -> float:
    mse = float(np.mean((np.asarray(x) - np.asarray(x_hat)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(x, x_hat, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all 8x8 sliding windows of every channel (uniform weights)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    view = np.lib.stride_tricks.sliding_window_view
    wa = view(a, (window, window), axis=(-2, -1))
    wb = view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def pixel_metrics(x, x_hat) -> tuple[float, float]:
    return psnr(x, x_hat), ssim(x, x_hat)


# --- Frechet distance on proxy features ---------------------------------
def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_proxy(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two feature vectors per set")
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    if not (np.all(np.isfinite(cov_a)) and np.all(np.isfinite(cov_b))):
        raise ValueError("non-finite covariance")
    diff = a.mean(axis=0) - b.mean(axis=0)
    # tr sqrt(A B) == tr sqrt(sqrt(A) B sqrt(A)), which is symmetric PSD
    root_a = _sqrt_psd(cov_a)
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    return max(0.0, float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross))
