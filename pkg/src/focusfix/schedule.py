"""Noise schedule for the denoising chain.

The schedule stores the cumulative signal-retention coefficients gamma_t for
t = 1..T (gamma_t close to 1 means nearly clean, close to 0 means nearly pure
noise). They are the cumulative product of (1 - beta_t) for a linearly spaced
per-step noise level beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class ConfigurationError(ValueError):
    """Invalid user-supplied configuration value."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step scaling factors of a T-step denoising chain.

    ``gammas[i]`` holds gamma_t for t = i + 1; gamma_0 is defined as 1
    (a fully clean image) and is not stored.
    """

    num_steps: int
    betas: torch.Tensor
    gammas: torch.Tensor = field(init=False)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigurationError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.betas.shape != (self.num_steps,):
            raise ConfigurationError(
                f"betas must have shape ({self.num_steps},), got {tuple(self.betas.shape)}"
            )
        gammas = torch.cumprod(1.0 - self.betas, dim=0)
        object.__setattr__(self, "gammas", gammas)
        if not bool(((gammas > 0) & (gammas < 1)).all()):
            raise ConfigurationError("schedule produced gamma outside (0, 1)")
        if self.num_steps > 1 and not bool((gammas[1:] < gammas[:-1]).all()):
            raise ConfigurationError("gamma must be strictly decreasing in t")

    @property
    def dtype(self) -> torch.dtype:
        return self.gammas.dtype

    def gamma(self, t: int) -> torch.Tensor:
        """gamma_t for t in [0, T]; gamma_0 = 1 by convention."""
        if t < 0 or t > self.num_steps:
            raise IndexError(f"step index {t} outside [0, {self.num_steps}]")
        if t == 0:
            return torch.ones((), dtype=self.gammas.dtype)
        return self.gammas[t - 1]

    def to(self, dtype: torch.dtype) -> "NoiseSchedule":
        return NoiseSchedule(self.num_steps, self.betas.to(dtype))


def make_schedule(
    num_steps: int,
    noise_range: tuple[float, float] = (0.004, 0.36),
    dtype: torch.dtype = torch.float32,
) -> NoiseSchedule:
    """Build a schedule with per-step noise levels linearly spaced over
    ``noise_range``.

    The default range is tuned so that gamma_T is small (a few 1e-5 at T=50),
    i.e. the terminal state of the chain is close to pure noise.
    """
    if num_steps < 1:
        raise ConfigurationError(f"num_steps must be >= 1, got {num_steps}")
    lo, hi = float(noise_range[0]), float(noise_range[1])
    if not (0.0 < lo < 1.0 and 0.0 < hi < 1.0):
        raise ConfigurationError(f"noise_range must lie inside (0, 1), got {noise_range}")
    if hi < lo:
        raise ConfigurationError(f"noise_range must be increasing, got {noise_range}")
    if num_steps == 1:
        betas = torch.tensor([(lo + hi) / 2.0], dtype=torch.float64)
    else:
        betas = torch.linspace(lo, hi, num_steps, dtype=torch.float64)
    return NoiseSchedule(num_steps, betas.to(dtype))
