"""Deterministic sampling with truncated gradient connectivity.

The reverse chain runs t = T..1 with no per-step noise injection, so an image
is a pure function of (parameters, condition, initial noise). Gradients flow
to the parameters only through the last K denoising steps: every earlier step
runs detached, which leaves the forward values bit-identical while severing
the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import check_step
from .schedule import ConfigurationError, NoiseSchedule
from .seeding import generator


class SamplingError(RuntimeError):
    """Non-finite value encountered along a sampling trajectory."""


def draw_initial_noise(
    shape: tuple[int, ...], seed: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    g = generator(seed, "x_init")
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


@dataclass
class SampleRequest:
    """One deterministic draw: condition id, initial noise and sampler knobs."""

    condition: int
    seed: int
    x_init: torch.Tensor | None = None
    truncate_k: int = 0
    cfg_weight: float = 1.0
    clamp_denoised: bool = True

    def initial_noise(self, image_shape: tuple[int, int, int], dtype: torch.dtype) -> torch.Tensor:
        if self.x_init is not None:
            if tuple(self.x_init.shape) != tuple(image_shape):
                raise ConfigurationError(
                    f"x_init shape {tuple(self.x_init.shape)} does not match model {image_shape}"
                )
            return self.x_init.to(dtype)
        return draw_initial_noise(tuple(image_shape), self.seed, dtype)


def predict_noise(model, x_t: torch.Tensor, cond, t: int) -> torch.Tensor:
    """Noise estimate of the denoiser at step t; deterministic in its inputs."""
    check_step(int(t), model.num_steps)
    return model(x_t, cond, t)


def cfg_predict(model, x_t: torch.Tensor, cond, t: int, w: float) -> torch.Tensor:
    """Classifier-free guided estimate: eps_u + w * (eps_c - eps_u).

    w = 1 and w = 0 short-circuit to the plain conditional / unconditional
    branch so the collapse is exact, not merely within rounding.
    """
    if w < 0:
        raise ConfigurationError(f"cfg weight must be >= 0, got {w}")
    if w == 1.0:
        return predict_noise(model, x_t, cond, t)
    null = model.null_condition
    if w == 0.0:
        return predict_noise(model, x_t, null, t)
    eps_c = predict_noise(model, x_t, cond, t)
    eps_u = predict_noise(model, x_t, null, t)
    return eps_u + w * (eps_c - eps_u)


def sample_batch(
    model,
    schedule: NoiseSchedule,
    cond: torch.Tensor,
    x_init: torch.Tensor,
    truncate_k: int = 0,
    cfg_weight: float = 1.0,
    clamp_denoised: bool = True,
) -> torch.Tensor:
    """Run the full reverse chain on a batch, with gradients connected only
    through the last ``truncate_k`` steps."""
    t_total = schedule.num_steps
    if not 0 <= truncate_k <= t_total:
        raise ConfigurationError(f"truncation depth {truncate_k} outside [0, {t_total}]")
    x = x_init
    dt = x.dtype
    for i, t in enumerate(range(t_total, 0, -1)):
        with_grad = i >= t_total - truncate_k
        with torch.set_grad_enabled(with_grad and torch.is_grad_enabled()):
            if not with_grad:
                x = x.detach()
            eps = cfg_predict(model, x, cond, t, cfg_weight)
            g_t = schedule.gamma(t).to(dt)
            g_prev = schedule.gamma(t - 1).to(dt)
            x0 = (x - torch.sqrt(1.0 - g_t) * eps) / torch.sqrt(g_t)
            if clamp_denoised:
                x0 = x0.clamp(-1.0, 1.0)
            x = torch.sqrt(g_prev) * x0 + torch.sqrt(1.0 - g_prev) * eps
        if not torch.isfinite(x).all():
            raise SamplingError(f"non-finite values in trajectory at step t={t}")
    return x


def sample(model, schedule: NoiseSchedule, req: SampleRequest) -> torch.Tensor:
    """Single-request wrapper around sample_batch; returns (C, H, W)."""
    dtype = next(model.parameters()).dtype
    x0 = req.initial_noise(model.image_shape, dtype).unsqueeze(0)
    cond = torch.tensor([req.condition], dtype=torch.long)
    out = sample_batch(
        model,
        schedule,
        cond,
        x0,
        truncate_k=req.truncate_k,
        cfg_weight=req.cfg_weight,
        clamp_denoised=req.clamp_denoised,
    )
    return out[0]
