"""PSNR, SSIM and the multi-scale L1 loss, as plain evaluation functions.

Conventions: tensors in [0, 1] are rescaled by ``scale`` (default 255)
before PSNR/SSIM; SSIM uses population (1/N) statistics and reduces RGB to
BT.601 luminance; PSNR pools all channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import as_tensor

__all__ = ["psnr", "ssim", "multiscale_l1", "luminance", "MetricReport", "C1", "C2"]

C1 = 6.5025  # (0.01 * 255)^2
C2 = 58.5225  # (0.03 * 255)^2
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(x, y):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def luminance(t) -> np.ndarray:
    t = as_tensor(t)
    if t.shape[2] == 1:
        return t
    if t.shape[2] == 3:
        return (t @ LUMA)[:, :, None]
    raise ValueError(f"luminance needs 1 or 3 channels, got {t.shape[2]}")


def psnr(x, y, scale: float = 255.0) -> float:
    """``10 log10(255^2 / MSE)``; ``inf`` when the inputs are identical."""
    x, y = _pair(x, y)
    mse = float(np.mean((scale * x - scale * y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _ssim_stats(a: np.ndarray, b: np.ndarray, axes) -> np.ndarray:
    mu_a, mu_b = a.mean(axis=axes), b.mean(axis=axes)
    da = a - np.expand_dims(mu_a, axes)
    db = b - np.expand_dims(mu_b, axes)
    va, vb, cov = (da * da).mean(axis=axes), (db * db).mean(axis=axes), (da * db).mean(axis=axes)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (va + vb + C2)
    return num / den


def ssim(x, y, mode: str = "global", window: int = 8, scale: float = 255.0) -> float:
    """Structural similarity on the 0-255 scale.

    ``mode='global'`` evaluates the formula once with whole-image statistics;
    ``mode='windowed'`` averages it over all ``window x window`` windows.
    """
    x, y = _pair(x, y)
    a = scale * luminance(x)[:, :, 0]
    b = scale * luminance(y)[:, :, 0]
    if mode == "global":
        return float(_ssim_stats(a, b, (0, 1)))
    if mode == "windowed":
        if window < 1 or window > min(a.shape):
            raise ValueError(f"window {window} does not fit image {a.shape}")
        wa = sliding_window_view(a, (window, window))
        wb = sliding_window_view(b, (window, window))
        return float(np.mean(_ssim_stats(wa, wb, (2, 3))))
    raise ValueError(f"unknown ssim mode {mode!r}")


def multiscale_l1(outputs: Mapping[tuple[int, int], np.ndarray], targets: Mapping[int, np.ndarray],
                  levels=(1, 2, 3)) -> float:
    """``sum_L sum_{k<=L} mean|Y^L_k - X_k|`` over the configured ``levels``."""
    total = 0.0
    for L in levels:
        for k in range(1, L + 1):
            if (L, k) not in outputs:
                raise ValueError(f"missing output term (L, k) = ({L}, {k})")
            if k not in targets:
                raise ValueError(f"missing target for level k = {k} (term (L, k) = ({L}, {k}))")
            y, t = _pair(outputs[(L, k)], targets[k])
            total += float(np.mean(np.abs(y - t)))
    return total


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    msl1: float | None = None
    per_level: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            "# psnr: all channels pooled, 0-255 scale; ssim: BT.601 luminance, global statistics",
            f"psnr_db={'inf' if math.isinf(self.psnr) else f'{self.psnr:.17g}'}",
            f"ssim={self.ssim:.17g}",
        ]
        if self.msl1 is not None:
            out.append(f"msl1={self.msl1:.17g}")
        return out

    def format(self) -> str:
        return "\n".join(self.lines()) + "\n"
