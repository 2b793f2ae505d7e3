"""Fusion quality metrics: entropy, spread, correlation, structure.

All functions take 2-d float arrays with values in [0, 1] and are pure;
nothing here participates in gradient computation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError, ShapeError
from .imageio import quantize

MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WIN = 11
_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _check_gray(img: np.ndarray, what: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ContractError(f"{what} must be 2-d grayscale, got shape {img.shape}")
    return img


def entropy(img: np.ndarray) -> float:
    """Shannon entropy in bits of the 256-level histogram."""
    img = _check_gray(img)
    counts = np.bincount(quantize(img).ravel(), minlength=256)
    p = counts[counts > 0] / img.size
    return float(-np.sum(p * np.log2(p)))


def sd(img: np.ndarray) -> float:
    """Population standard deviation on the 0-255 scale."""
    return float(np.std(_check_gray(img) * 255.0))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation coefficient; zero by convention on constant input."""
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    va = np.sum(da * da)
    vb = np.sum(db * db)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float(np.sum(da * db) / np.sqrt(va * vb))


def scd(fused: np.ndarray, vis: np.ndarray, ir: np.ndarray) -> float:
    """Sum of correlations between each difference image and the other source."""
    fused, vis, ir = (_check_gray(x, n) for x, n in
                      ((fused, "fused"), (vis, "visible"), (ir, "infrared")))
    if not (fused.shape == vis.shape == ir.shape):
        raise ShapeError(
            f"shapes differ: {fused.shape}, {vis.shape}, {ir.shape}")
    return _pearson(fused - ir, vis) + _pearson(fused - vis, ir)


def _gauss1d() -> np.ndarray:
    half = _WIN // 2
    g = np.exp(-0.5 * ((np.arange(_WIN) - half) / _SIGMA) ** 2)
    return g / g.sum()


_G = _gauss1d()


def _windowed(x: np.ndarray) -> np.ndarray:
    # separable Gaussian, then crop to the valid region so the boundary
    # mode never influences the result
    half = _WIN // 2
    y = correlate1d(correlate1d(x, _G, axis=0), _G, axis=1)
    return y[half:-half, half:-half]


def _ssim_maps(a: np.ndarray, b: np.ndarray) -> tuple:
    c1, c2 = _K1 ** 2, _K2 ** 2
    mua, mub = _windowed(a), _windowed(b)
    va = _windowed(a * a) - mua * mua
    vb = _windowed(b * b) - mub * mub
    cov = _windowed(a * b) - mua * mub
    cs = (2.0 * cov + c2) / (va + vb + c2)
    lum = (2.0 * mua * mub + c1) / (mua * mua + mub * mub + c1)
    return lum * cs, cs


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity with the standard five-scale weights.

    Images too small for five scales fall back to as many scales as fit
    (warning issued, weights renormalized); below one 11x11 window it is
    an error.
    """
    a = _check_gray(a, "first image")
    b = _check_gray(b, "second image")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ, {a.shape} vs {b.shape}")
    side = min(a.shape)
    if side < _WIN:
        raise ShapeError(f"min side {side} is below the {_WIN}x{_WIN} window")
    sides = [side]
    while len(sides) < len(MS_WEIGHTS) and sides[-1] // 2 >= _WIN:
        sides.append(sides[-1] // 2)
    scales = len(sides)
    weights = np.array(MS_WEIGHTS[:scales])
    if scales < len(MS_WEIGHTS):
        warnings.warn(
            f"min side {side} supports only {scales} of {len(MS_WEIGHTS)} "
            f"scales; weights renormalized")
        weights = weights / weights.sum()
    value = 1.0
    for s in range(scales):
        ssim_map, cs_map = _ssim_maps(a, b)
        term = float(np.mean(ssim_map if s == scales - 1 else cs_map))
        value *= max(term, 0.0) ** weights[s]
        if s != scales - 1:
            a, b = _halve(a), _halve(b)
    return float(value)


@dataclass(frozen=True)
class MetricReport:
    """All four metrics for one (fused, visible, infrared) triple."""

    en: float
    sd: float
    scd: float
    ms_ssim_mean: float
    ms_ssim_sum: float

    def __post_init__(self):
        bounds = {"en": (0.0, 8.0), "sd": (0.0, np.inf),
                  "scd": (-2.0, 2.0), "ms_ssim_mean": (-1.0, 1.0),
                  "ms_ssim_sum": (-2.0, 2.0)}
        for name, (lo, hi) in bounds.items():
            v = getattr(self, name)
            if not np.isfinite(v) or not lo <= v <= hi:
                raise ContractError(f"{name}={v} outside [{lo}, {hi}]")


def evaluate_triple(fused: np.ndarray, vis: np.ndarray,
                    ir: np.ndarray) -> MetricReport:
    """Metric report for a fused image against its two sources."""
    mv = ms_ssim(fused, vis)
    mi = ms_ssim(fused, ir)
    return MetricReport(en=entropy(fused), sd=sd(fused),
                        scd=scd(fused, vis, ir),
                        ms_ssim_mean=0.5 * (mv + mi), ms_ssim_sum=mv + mi)
