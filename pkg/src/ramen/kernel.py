"""Gaussian kernel and median-heuristic bandwidth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

DEFAULT_CAP = 2000


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float
    subsample_cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    return a


def median_bandwidth(points, cap: int = DEFAULT_CAP, seed: int = 0) -> float:
    """Median pairwise Euclidean distance, on at most ``cap`` seeded-subsampled points.

    Falls back to 1.0 when there are fewer than two points, no columns, or
    the median distance is zero.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    m = pts.shape[0]
    if m < 2 or pts.ndim != 2 or pts.shape[1] == 0:
        return 1.0
    if m > cap:
        idx = np.random.default_rng(seed).choice(m, size=cap, replace=False)
        pts = pts[idx]
    med = float(np.median(pdist(pts)))
    if not np.isfinite(med) or med <= 0.0:
        return 1.0
    return med


def gaussian_gram(A, B, sigma: float) -> np.ndarray:
    """``k(a, b) = exp(-||a - b||^2 / (2 sigma^2))`` for every row pair.

    Zero-column inputs give the constant kernel 1.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    A, B = _as_2d(A), _as_2d(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]} columns")
    if A.shape[1] == 0:
        return np.ones((A.shape[0], B.shape[0]))
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * sigma * sigma))
