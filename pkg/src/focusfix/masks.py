"""Heatmap -> binary region mask pipeline.

threshold -> keep main connected components -> dilate. Components use
4-connectivity; dilation uses a square structuring element of side
2 * radius + 1. An all-zero result is legal and flagged "no problem found".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .schedule import ConfigurationError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class MaskConfig:
    threshold: float = 0.4
    min_area: int = 4
    max_components: int = 3
    dilation_radius: int = 2


@dataclass
class RegionMask:
    """Binary per-pixel map plus provenance metadata."""

    data: torch.Tensor  # (H, W) float in {0, 1}
    threshold: float = 0.0
    component_count: int = 0
    dilation_radius: int = 0
    heatmap_max: float = 0.0
    heatmap_mean: float = 0.0
    empty: bool = field(default=False)

    def __post_init__(self):
        uniq = torch.unique(self.data)
        if not bool(((uniq == 0) | (uniq == 1)).all()):
            raise ValueError("mask values must be in {0, 1}")
        self.empty = bool((self.data == 0).all())

    @property
    def area(self) -> int:
        return int(self.data.sum())

    @property
    def area_fraction(self) -> float:
        return float(self.data.mean())

    def numpy(self) -> np.ndarray:
        return self.data.numpy().astype(bool)

    def with_data(self, arr: np.ndarray, **updates) -> "RegionMask":
        meta = {
            "threshold": self.threshold,
            "component_count": self.component_count,
            "dilation_radius": self.dilation_radius,
            "heatmap_max": self.heatmap_max,
            "heatmap_mean": self.heatmap_mean,
        }
        meta.update(updates)
        return RegionMask(torch.from_numpy(arr.astype(np.float32)), **meta)


def full_mask(shape: tuple[int, int]) -> RegionMask:
    return RegionMask(torch.ones(shape), threshold=0.0)


def threshold_mask(heatmap: torch.Tensor, tau: float) -> RegionMask:
    """mask(p) = 1 iff heatmap(p) >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"threshold must lie in [0, 1], got {tau}")
    hm = heatmap.detach()
    mask = (hm >= tau).to(torch.float32)
    return RegionMask(
        mask,
        threshold=float(tau),
        heatmap_max=float(hm.max()),
        heatmap_mean=float(hm.mean()),
    )


def keep_main_components(mask: RegionMask, min_area: int = 4, max_components: int = 3) -> RegionMask:
    """Keep components (4-connectivity) with area >= min_area, at most the
    max_components largest. Never adds pixels."""
    arr = mask.numpy()
    labels, n = ndimage.label(arr, structure=FOUR_CONNECTED)
    if n == 0:
        return mask.with_data(arr, component_count=0)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    order = sorted(range(1, n + 1), key=lambda lab: (-areas[lab - 1], lab))
    keep = [lab for lab in order if areas[lab - 1] >= min_area][:max_components]
    out = np.isin(labels, keep)
    return mask.with_data(out, component_count=len(keep))


def dilate(mask: RegionMask, radius: int) -> RegionMask:
    """Morphological dilation with a (2r+1)-square structuring element."""
    if radius < 0:
        raise ConfigurationError(f"dilation radius must be >= 0, got {radius}")
    if radius == 0:
        return mask.with_data(mask.numpy(), dilation_radius=0)
    arr = mask.numpy()
    out = ndimage.binary_dilation(arr, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))
    return mask.with_data(out, dilation_radius=radius)


def extract_region(heatmap: torch.Tensor, cfg: MaskConfig | None = None) -> RegionMask:
    """Full pipeline of Algorithm-style region prediction from a heatmap."""
    cfg = cfg or MaskConfig()
    m = threshold_mask(heatmap, cfg.threshold)
    m = keep_main_components(m, cfg.min_area, cfg.max_components)
    m = dilate(m, cfg.dilation_radius)
    return m
