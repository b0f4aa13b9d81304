"""Differentiable rewards with localization.

Two reward models score images (higher is better, problem = negative):

* ``DefectFilterReward`` - a fixed quadrature filter bank matched to the
  checkerboard defect texture. Emits a native per-pixel heatmap alongside the
  scalar score. The four 4x4 kernels are separable cos/sin probes at the
  checkerboard's fundamental frequency, so the pooled energy is invariant to
  the patch's sub-cell alignment. Kernel taps are exact multiples of 1/2 and
  sum to exactly zero, which makes the response invariant to uniform image
  offsets.

* ``ClassifierReward`` - a small CNN trained to predict the defect flag; its
  score is the negated defect probability, and localization comes from
  input-gradient saliency.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import data as data_mod
from .schedule import ConfigurationError

log = logging.getLogger(__name__)


class StateError(RuntimeError):
    """Operation requires a trained/loaded model that is not available."""


@dataclass
class RewardOutput:
    score: torch.Tensor  # scalar, differentiable w.r.t. the image
    heatmap: torch.Tensor | None = None  # (H, W) in [0, 1], detached


def gaussian_smooth(heatmap: torch.Tensor, kernel_size: int = 16, sigma: float = 4.0) -> torch.Tensor:
    """Separable Gaussian smoothing with reflect-padded borders.

    The kernel is tabulated at offsets centered on the window (half-integer
    offsets for even sizes) and normalized to unit mass, so constant inputs
    pass through unchanged.
    """
    if kernel_size < 1:
        raise ConfigurationError(f"kernel_size must be >= 1, got {kernel_size}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    offsets = np.arange(kernel_size, dtype=np.float64) - (kernel_size - 1) / 2.0
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    weights /= weights.sum()
    arr = heatmap.detach().cpu().numpy().astype(np.float64)
    arr = ndimage.correlate1d(arr, weights, axis=0, mode="reflect")
    arr = ndimage.correlate1d(arr, weights, axis=1, mode="reflect")
    return torch.from_numpy(arr).to(heatmap.dtype)


def smoothing_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """The tabulated 1-D kernel used by gaussian_smooth (for inspection)."""
    offsets = np.arange(kernel_size, dtype=np.float64) - (kernel_size - 1) / 2.0
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _quadrature_kernels(cell: int = data_mod.DEFECT_CELL, dtype=torch.float32) -> torch.Tensor:
    """Four zero-sum cos/sin product kernels at the checkerboard frequency."""
    taps = 2 * cell
    k = np.arange(taps)
    f_cos = np.cos(np.pi * k / cell)
    f_sin = np.sin(np.pi * k / cell)
    f_cos = np.round(f_cos)  # exact {1, 0, -1} taps
    f_sin = np.round(f_sin)
    banks = [np.outer(a, b) for a in (f_cos, f_sin) for b in (f_cos, f_sin)]
    kern = torch.tensor(np.stack(banks), dtype=dtype)[:, None]
    return kern / 2.0  # unit L2 norm; taps stay exact powers of two


class DefectFilterReward(nn.Module):
    """Matched-filter defect reward with a native heatmap.

    score(x) = -tanh(mean quadrature energy / scale); the scale is fixed so a
    single ideal defect patch on a flat background scores -0.75. The heatmap
    is the per-pixel response amplitude relative to that ideal patch's peak,
    clipped to [0, 1] - an absolute scale, so clean images map to near-empty
    heatmaps rather than being renormalized to full brightness.
    """

    TARGET_SCORE = 0.75

    def __init__(self, image_size: int = 32):
        super().__init__()
        kernels = _quadrature_kernels()
        self.register_buffer("kernels", kernels)
        self.pad = (1, 2, 1, 2)  # same-size output for the 4x4 bank
        probe = np.full((image_size, image_size), data_mod.BACKGROUND, dtype=np.float32)
        lo = (image_size - data_mod.DEFECT_SIZE) // 2
        probe[lo : lo + data_mod.DEFECT_SIZE, lo : lo + data_mod.DEFECT_SIZE] = (
            data_mod.checkerboard_patch()
        )
        with torch.no_grad():
            energy = self._energy(torch.from_numpy(probe)[None, None].float())
        self.peak_amplitude = float(energy.max().sqrt())
        self.energy_scale = float(energy.mean()) / math.atanh(self.TARGET_SCORE)

    def _energy(self, lum: torch.Tensor) -> torch.Tensor:
        """Per-pixel quadrature energy of a (B, 1, H, W) luminance batch."""
        if lum.shape[-1] < 4 or lum.shape[-2] < 4:
            raise ConfigurationError("image smaller than the 4x4 filter bank")
        padded = F.pad(lum, self.pad, mode="reflect")
        resp = F.conv2d(padded, self.kernels.to(lum.dtype))
        return (resp**2).sum(dim=1)

    def score_batch(self, images: torch.Tensor, cond=None) -> torch.Tensor:
        """(B,) differentiable scores in (-1, 0]."""
        lum = images.mean(dim=1, keepdim=True)
        energy = self._energy(lum)
        return -torch.tanh(energy.mean(dim=(1, 2)) / self.energy_scale)

    def heatmap_batch(self, images: torch.Tensor, cond=None) -> torch.Tensor:
        """(B, H, W) detached response amplitudes in [0, 1]."""
        with torch.no_grad():
            lum = images.mean(dim=1, keepdim=True)
            amp = self._energy(lum).sqrt()
        return (amp / self.peak_amplitude).clamp(0.0, 1.0)

    def forward(self, image: torch.Tensor, cond=None) -> RewardOutput:
        batch = image.unsqueeze(0)
        return RewardOutput(
            score=self.score_batch(batch, cond)[0],
            heatmap=self.heatmap_batch(batch, cond)[0],
        )


def defect_score(image: torch.Tensor, cond=None, reward: DefectFilterReward | None = None) -> RewardOutput:
    if reward is None:
        reward = DefectFilterReward(image_size=image.shape[-1])
    return reward(image, cond)


class DefectClassifier(nn.Module):
    """Small CNN predicting the defect logit; smooth activations keep the
    input gradient well-defined for saliency and finite-difference checks."""

    def __init__(self, channels: int = 16):
        super().__init__()
        c = channels
        self.conv1 = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.head = nn.Linear(4 * c, 1)
        self.trained = False

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        h1 = F.silu(self.conv1(x))
        h2 = F.silu(self.conv2(h1))
        h3 = F.silu(self.conv3(h2))
        return [h1, h2, h3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        return self.head(h.mean(dim=(2, 3))).squeeze(-1)


class ClassifierReward(nn.Module):
    """Score-only reward: -p(defect) in [-1, 0]."""

    def __init__(self, classifier: DefectClassifier):
        super().__init__()
        self.classifier = classifier

    def _check(self):
        if not self.classifier.trained:
            raise StateError("defect classifier has not been trained or loaded")

    def score_batch(self, images: torch.Tensor, cond=None) -> torch.Tensor:
        self._check()
        return -torch.sigmoid(self.classifier(images))

    def heatmap_batch(self, images: torch.Tensor, cond=None, kernel_size: int = 16, sigma: float = 4.0) -> torch.Tensor:
        maps = [
            saliency_heatmap(lambda im, c=None: self.score_batch(im.unsqueeze(0))[0], img, None, kernel_size, sigma)
            for img in images
        ]
        return torch.stack(maps)

    def forward(self, image: torch.Tensor, cond=None) -> RewardOutput:
        return RewardOutput(score=self.score_batch(image.unsqueeze(0), cond)[0], heatmap=None)


def classifier_score(image: torch.Tensor, cond=None, reward: ClassifierReward | None = None) -> RewardOutput:
    if reward is None:
        raise StateError("classifier_score requires a trained ClassifierReward")
    return reward(image, cond)


def saliency_heatmap(
    score_fn,
    image: torch.Tensor,
    cond=None,
    kernel_size: int = 16,
    sigma: float = 4.0,
) -> torch.Tensor:
    """Input-gradient saliency: smooth(|d(-score)/d image| max over channels),
    normalized to peak 1. A zero gradient yields an all-zero map (flagged in
    the log, not an error)."""
    x = image.detach().clone().requires_grad_(True)
    score = score_fn(x, cond)
    grad = torch.autograd.grad(-score, x)[0]
    raw = grad.abs().amax(dim=0)
    smoothed = gaussian_smooth(raw, kernel_size, sigma)
    peak = smoothed.max()
    if peak <= 0:
        log.warning("saliency: zero gradient everywhere, returning empty heatmap")
        return torch.zeros_like(smoothed)
    return (smoothed / peak).clamp(0.0, 1.0)


def calibrate_defect_threshold(
    reward: DefectFilterReward, clean_images: torch.Tensor, quantile: float = 0.99
) -> dict:
    """Record the clean-sample response quantile that separates 'defected'.

    Returns the response quantile and the equivalent score threshold: an
    image counts as defected when its score falls below the threshold.
    """
    with torch.no_grad():
        lum = clean_images.mean(dim=1, keepdim=True)
        mean_energy = reward._energy(lum).mean(dim=(1, 2))
    q = float(np.quantile(mean_energy.numpy(), quantile))
    return {
        "n_clean": int(clean_images.shape[0]),
        "quantile": quantile,
        "energy_q": q,
        "score_threshold": -math.tanh(q / reward.energy_scale),
    }


REWARD_KINDS = ("defect", "classifier")


def build_reward(kind: str, image_size: int = 32, classifier: DefectClassifier | None = None):
    if kind == "defect":
        return DefectFilterReward(image_size=image_size)
    if kind == "classifier":
        if classifier is None:
            raise StateError("classifier reward requested but no classifier supplied")
        return ClassifierReward(classifier)
    raise ConfigurationError(f"unknown reward kind {kind!r}; expected one of {REWARD_KINDS}")
