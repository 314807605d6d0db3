"""Two-sample distribution metrics and classification accuracy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

MAX_KERNEL_SAMPLES = 10_000


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, feats: np.ndarray) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or len(feats) < 2:
            raise ValueError("need at least two feature vectors")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False, ddof=1)))


def _cap(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(len(x), -1)
    return x[:MAX_KERNEL_SAMPLES]


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    Z = np.concatenate([_cap(X), _cap(Y)])
    return float(np.median(pdist(Z)))


def mmd2(X, Y, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel exp(-|a-b|^2 / (2 bw^2)).

    ``bandwidth=None`` uses the median pairwise distance of the pooled sample.
    """
    X, Y = _cap(X), _cap(Y)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ValueError("mmd2 needs at least two samples per set")
    bw = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError(f"degenerate kernel bandwidth {bw}")
    g = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-g * pdist(X, "sqeuclidean"))
    kyy = np.exp(-g * pdist(Y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(X, Y, "sqeuclidean"))
    # fsum keeps the value independent of summation order, so mmd2(X,Y) == mmd2(Y,X)
    sxx = 2.0 * math.fsum(kxx) / (m * (m - 1))
    syy = 2.0 * math.fsum(kyy) / (n * (n - 1))
    sxy = 2.0 * math.fsum(kxy.ravel()) / (m * n)
    return math.fsum([sxx, syy]) - sxy


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))."""
    if g1.mean.shape != g2.mean.shape or g1.cov.shape != g2.cov.shape:
        raise ValueError(f"dimension mismatch: {g1.mean.shape} vs {g2.mean.shape}")
    s1 = _sqrt_psd(g1.cov)
    mid = s1 @ g2.cov @ s1
    w = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = g1.mean - g2.mean
    value = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet(GaussianSummary.fit(a), GaussianSummary.fit(b))


def accuracy(predict, x, y) -> float:
    """Fraction of argmax matches; ``predict`` maps inputs to logits or labels."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset")
    out = np.asarray(predict(x))
    pred = out.argmax(axis=1) if out.ndim == 2 else out
    return float((pred == y).mean())
