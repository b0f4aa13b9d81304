"""Inference-time reward guidance (RG) and its region-constrained variant
(RG + RC). No parameter updates: the noise estimate is nudged by the clipped
reward gradient at each step, optionally masked to the problem region.

The update direction is chosen so guided samples increase the reward: the
noise estimate moves against the reward gradient (adding the gradient of the
loss -r), which under the deterministic update rule pushes the denoised
iterate up the reward slope.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .masks import MaskConfig, extract_region
from .sampler import SampleRequest, cfg_predict
from .schedule import ConfigurationError, NoiseSchedule

log = logging.getLogger(__name__)


@dataclass
class GuidanceConfig:
    scale: float = 2.0  # guidance magnitude
    clip_norm: float = 2.0  # L2 clip threshold for the reward gradient
    start_step: int = 10  # loop index (0 = noisiest) before which guidance is off
    use_region_constraint: bool = False
    mask: torch.Tensor | None = None  # optional precomputed region mask (H, W)
    mask_cfg: MaskConfig = field(default_factory=MaskConfig)

    def validate(self, num_steps: int) -> None:
        if self.scale < 0:
            raise ConfigurationError(f"guidance scale must be >= 0, got {self.scale}")
        if self.clip_norm <= 0:
            raise ConfigurationError(f"clip threshold must be > 0, got {self.clip_norm}")
        if not 0 <= self.start_step <= num_steps:
            raise ConfigurationError(
                f"start_step {self.start_step} outside [0, {num_steps}]"
            )


def clip_gradient(grad: torch.Tensor, threshold: float) -> torch.Tensor:
    """Scale the gradient so its L2 norm is at most ``threshold``."""
    norm = torch.linalg.vector_norm(grad)
    if norm > threshold:
        return grad * (threshold / norm)
    return grad


def resize_mask(mask: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resize preserving binarity; identity on equal shapes."""
    if tuple(mask.shape) == tuple(shape):
        return mask
    out = F.interpolate(mask[None, None].float(), size=shape, mode="nearest")[0, 0]
    return out.to(mask.dtype)


def guided_noise(
    eps: torch.Tensor,
    x_t: torch.Tensor,
    r_fn,
    schedule: NoiseSchedule,
    t: int,
    cfg: GuidanceConfig,
    step_index: int,
    mask: torch.Tensor | None = None,
    trace: list | None = None,
) -> torch.Tensor:
    """Replace the noise estimate with its reward-guided version.

    Pass-through is exact (the same tensor object) when the scale is zero,
    before the start step, or when the mask is all zero. A non-finite reward
    gradient falls back to the unguided estimate for this step.
    """
    if cfg.scale == 0.0 or step_index < cfg.start_step:
        return eps
    if mask is not None and bool((mask == 0).all()):
        return eps

    with torch.enable_grad():
        x = x_t.detach().clone().requires_grad_(True)
        score = r_fn(x)
        grad = torch.autograd.grad(score.sum(), x)[0]
    if not torch.isfinite(grad).all():
        log.warning("guidance: non-finite reward gradient at t=%d, skipping step", t)
        return eps

    norm_before = float(torch.linalg.vector_norm(grad))
    grad = clip_gradient(grad, cfg.clip_norm)
    if trace is not None:
        trace.append(
            {"t": t, "grad_norm": norm_before, "clipped_norm": float(torch.linalg.vector_norm(grad))}
        )
    gamma_t = schedule.gamma(t).to(eps.dtype)
    term = cfg.scale * torch.sqrt(1.0 - gamma_t) * grad
    if mask is not None:
        term = term * mask.to(eps.dtype)
    return eps - term


def guided_sample(
    model,
    schedule: NoiseSchedule,
    req: SampleRequest,
    r_fn,
    cfg: GuidanceConfig,
    reward=None,
    return_trace: bool = False,
):
    """Deterministic guided sampling (no parameter gradients).

    For RG + RC without a precomputed mask, the region is extracted from an
    unguided reference sample drawn with the same initial noise.
    """
    cfg.validate(schedule.num_steps)
    dtype = next(model.parameters()).dtype
    x = req.initial_noise(model.image_shape, dtype).unsqueeze(0)
    cond = torch.tensor([req.condition], dtype=torch.long)

    mask = None
    if cfg.use_region_constraint:
        if cfg.mask is not None:
            mask = resize_mask(cfg.mask, model.image_shape[-2:])
        else:
            if reward is None:
                raise ConfigurationError(
                    "region-constrained guidance needs a reward with heatmaps "
                    "or an explicit mask"
                )
            from .sampler import sample_batch

            with torch.no_grad():
                ref = sample_batch(
                    model, schedule, cond, x, truncate_k=0,
                    cfg_weight=req.cfg_weight, clamp_denoised=req.clamp_denoised,
                )[0]
            heatmap = reward.heatmap_batch(ref.unsqueeze(0))[0]
            region = extract_region(heatmap, cfg.mask_cfg)
            mask = resize_mask(region.data, model.image_shape[-2:])

    trace: list | None = [] if return_trace else None
    t_total = schedule.num_steps
    with torch.no_grad():
        for i, t in enumerate(range(t_total, 0, -1)):
            eps = cfg_predict(model, x, cond, t, req.cfg_weight)
            eps = guided_noise(eps, x, r_fn, schedule, t, cfg, i, mask=mask, trace=trace)
            g_t = schedule.gamma(t).to(dtype)
            g_prev = schedule.gamma(t - 1).to(dtype)
            x0 = (x - torch.sqrt(1.0 - g_t) * eps) / torch.sqrt(g_t)
            if req.clamp_denoised:
                x0 = x0.clamp(-1.0, 1.0)
            x = torch.sqrt(g_prev) * x0 + torch.sqrt(1.0 - g_prev) * eps
    out = x[0]
    if return_trace:
        return out, trace, mask
    return out
