"""Gaussian-window SSIM with an exact analytic gradient, plus PSNR.

SSIM uses the standard 11x11 window (sigma 1.5) and constants k1=0.01,
k2=0.03 on images in [0, 1]. Statistics are computed over windows fully
inside the image ("valid" centers); the per-window SSIM map may further be
restricted by a mask at the window center.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
C1 = (K1) ** 2
C2 = (K2) ** 2
_RADIUS = WINDOW_SIZE // 2


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


_W1 = gaussian_window()


def _filt(x: np.ndarray) -> np.ndarray:
    """Separable window correlation with zero padding (full image size)."""
    y = correlate1d(x, _W1, axis=0, mode="constant")
    return correlate1d(y, _W1, axis=1, mode="constant")


def _crop(x: np.ndarray) -> np.ndarray:
    return x[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS]


def _embed(x: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    out[_RADIUS:-_RADIUS, _RADIUS:-_RADIUS] = x
    return out


def ssim_channel_stats(x: np.ndarray, y: np.ndarray):
    """Per-window SSIM map over valid centers, plus the intermediates the
    gradient needs. x, y are single-channel (H, W)."""
    mux = _crop(_filt(x))
    muy = _crop(_filt(y))
    vx = _crop(_filt(x * x))
    vy = _crop(_filt(y * y))
    vxy = _crop(_filt(x * y))
    sxx = vx - mux * mux
    syy = vy - muy * muy
    sxy = vxy - mux * muy
    a1 = 2.0 * mux * muy + C1
    a2 = 2.0 * sxy + C2
    b1 = mux * mux + muy * muy + C1
    b2 = sxx + syy + C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mux, muy, a1, a2, b1, b2)


def ssim(x: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean SSIM over valid window centers (and channels for color images)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("ssim inputs must share a shape")
    if x.shape[0] < WINDOW_SIZE or x.shape[1] < WINDOW_SIZE:
        raise ValueError(f"image smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    if mask is not None:
        m = _crop(np.asarray(mask, dtype=np.float64))
        if m.sum() == 0:
            raise ValueError("no supervised window centers under the mask")
    total = 0.0
    for c in range(x.shape[2]):
        s, _ = ssim_channel_stats(x[..., c], y[..., c])
        if mask is None:
            total += s.mean()
        else:
            total += (s * m).sum() / m.sum()
    return total / x.shape[2]


def ssim_with_grad(x: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None):
    """Returns (mean SSIM, d(mean SSIM)/dx) for x, y in (H, W, C)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    H, W, C = x.shape
    if H < WINDOW_SIZE or W < WINDOW_SIZE:
        raise ValueError(f"image smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window")
    if mask is not None:
        m = _crop(np.asarray(mask, dtype=np.float64))
        msum = m.sum()
        if msum == 0:
            raise ValueError("no supervised window centers under the mask")
    grad = np.zeros_like(x)
    total = 0.0
    for c in range(C):
        xc, yc = x[..., c], y[..., c]
        s, (mux, muy, a1, a2, b1, b2) = ssim_channel_stats(xc, yc)
        if mask is None:
            wmap = np.full(s.shape, 1.0 / (s.size * C))
            total += s.mean() / C
        else:
            wmap = m / (msum * C)
            total += (s * wmap).sum()
        inv = 1.0 / (b1 * b2)
        S = a1 * a2 * inv
        d_mux = (2.0 * muy * a2 * inv - 2.0 * muy * a1 * inv
                 - 2.0 * mux * S / b1 + 2.0 * mux * S / b2)
        d_vx = -S / b2
        d_vxy = 2.0 * a1 * inv
        ga = wmap * d_mux
        gb = wmap * d_vx
        gc = wmap * d_vxy
        shape = xc.shape
        grad[..., c] = (_filt(_embed(ga, shape))
                        + 2.0 * xc * _filt(_embed(gb, shape))
                        + yc * _filt(_embed(gc, shape)))
    return total, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; +inf for identical
    inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
