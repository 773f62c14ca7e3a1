"""Reconstruction and uncertainty metrics for normalized depth rasters.

SSIM uses the canonical parameterization: 11x11 Gaussian window with
sigma = 1.5, C1 = 0.01**2 and C2 = 0.03**2 for unit dynamic range, averaged
over valid window positions only (no padding).
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError
from .grid import as_grid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(truth, pred):
    t = as_grid(truth, "truth")
    p = as_grid(pred, "pred")
    if t.shape != p.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {p.shape}")
    return t, p


def mse(truth, pred) -> float:
    t, p = _pair(truth, pred)
    d = t - p
    return float(np.mean(d * d))


def mae(truth, pred) -> float:
    t, p = _pair(truth, pred)
    return float(np.mean(np.abs(t - p)))


def psnr(truth, pred, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the grids are identical."""
    err = mse(truth, pred)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


@lru_cache(maxsize=8)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian window sampled at integer offsets."""
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    win.setflags(write=False)
    return win


def ssim(truth, pred) -> float:
    """Mean structural similarity over sliding Gaussian windows."""
    t, p = _pair(truth, pred)
    if t.shape[0] < SSIM_WINDOW or t.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"grid {t.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = gaussian_window()
    smap = kernels.ssim_map(t, p, win, SSIM_C1, SSIM_C2)
    return float(smap.mean())


def uncertainty_width(lower, upper) -> float:
    """Mean width of the prediction interval."""
    lo, up = _pair(lower, upper)
    if np.any(up < lo):
        raise DomainError("upper bound below lower bound")
    return float(np.mean(up - lo))


def coverage(truth, lower, upper) -> float:
    """Fraction of pixels whose true value lies inside [lower, upper]."""
    t = as_grid(truth, "truth")
    lo, up = _pair(lower, upper)
    if t.shape != lo.shape:
        raise ShapeError(f"shape mismatch: {t.shape} vs {lo.shape}")
    inside = (t >= lo) & (t <= up)
    return float(inside.mean())


def calibration_error(observed_coverage: float, nominal: float) -> float:
    if not 0.0 < nominal < 1.0:
        raise DomainError(f"nominal confidence must be in (0, 1), got {nominal}")
    return abs(float(observed_coverage) - float(nominal))


@dataclass
class MetricsRow:
    """One table row: a method evaluated on one region (or overall)."""

    label: str
    region: str
    ssim: float
    psnr_db: float
    mse: float
    mae: float
    block_size: int | None = None
    uwidth: float | None = None
    cal_err: float | None = None
    tile_count: int = 0

    def validate(self) -> "MetricsRow":
        if not -1.0 <= self.ssim <= 1.0 + 1e-12:
            raise DomainError(f"ssim out of range: {self.ssim}")
        if self.mse < 0 or self.mae < 0:
            raise DomainError("mse/mae must be non-negative")
        if self.uwidth is not None and self.uwidth < 0:
            raise DomainError("uwidth must be non-negative")
        if self.cal_err is not None and not 0.0 <= self.cal_err <= 1.0:
            raise DomainError(f"cal_err out of range: {self.cal_err}")
        return self
