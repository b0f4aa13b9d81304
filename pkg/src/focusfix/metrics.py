"""Image similarity metrics and region-restricted change statistics.

Pixel range is [-1, 1] internally, so the PSNR/SSIM data range is 2.0.
The perceptual distance runs the defect classifier's intermediate
activations through the usual unit-normalize-and-compare recipe.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .rewards import DefectClassifier, StateError
from .schedule import ConfigurationError

DATA_RANGE = 2.0
PSNR_CAP = 100.0


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = DATA_RANGE) -> float:
    """10 log10(MAX^2 / MSE) in dB, capped at 100 for (near-)identical pairs."""
    _check_shapes(a, b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter2(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    out = ndimage.correlate1d(img, window, axis=0, mode="reflect")
    return ndimage.correlate1d(out, window, axis=1, mode="reflect")


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    data_range: float = DATA_RANGE,
) -> float:
    """Mean local SSIM with a Gaussian window and standard stabilizers."""
    _check_shapes(a, b)
    if a.ndim == 2:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    h, w = a.shape[-2:]
    if h < window_size or w < window_size:
        raise ConfigurationError(
            f"image {h}x{w} smaller than SSIM window {window_size}"
        )
    win = _gaussian_window(window_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x = a[ch].double().numpy()
        y = b[ch].double().numpy()
        mu_x = _filter2(x, win)
        mu_y = _filter2(y, win)
        xx = _filter2(x * x, win) - mu_x**2
        yy = _filter2(y * y, win) - mu_y**2
        xy = _filter2(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, classifier: DefectClassifier) -> float:
    """LPIPS-style distance through the defect classifier's feature stack."""
    if not classifier.trained:
        raise StateError("perceptual distance requires a trained classifier")
    _check_shapes(a, b)
    with torch.no_grad():
        fa = classifier.features(a.unsqueeze(0))
        fb = classifier.features(b.unsqueeze(0))
    total = 0.0
    for xa, xb in zip(fa, fb):
        na = xa / (xa.norm(dim=1, keepdim=True) + 1e-8)
        nb = xb / (xb.norm(dim=1, keepdim=True) + 1e-8)
        total += float(((na - nb) ** 2).sum(dim=1).mean())
    return total


def region_change_stats(
    ref: torch.Tensor, gen: torch.Tensor, mask: torch.Tensor
) -> tuple[float | None, float | None]:
    """(inside, outside) mean absolute change; a degenerate side is None."""
    _check_shapes(ref, gen)
    m = mask.bool()
    diff = (ref.double() - gen.double()).abs().mean(dim=0)  # channel-averaged (H, W)
    inside = float(diff[m].mean()) if bool(m.any()) else None
    outside = float(diff[~m].mean()) if bool((~m).any()) else None
    return inside, outside
