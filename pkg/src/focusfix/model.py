"""Conditional noise-prediction networks.

Two denoisers share one interface: ``forward(x_t, cond, t) -> predicted
noise`` with ``x_t`` shaped (B, C, H, W), ``cond`` a batch of condition ids
(the reserved id ``num_conditions`` is the null condition used for
classifier-free guidance) and ``t`` an integer step in [1, T].

``SmallUNet`` is the production model: a two-level residual encoder/decoder
with the condition embedding added to the timestep embedding. ``MLPDenoiser``
is a deliberately tiny fully-connected variant used for finite-difference
gradient oracles on miniature images.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _as_index_batch(v, batch: int) -> torch.Tensor:
    if isinstance(v, int):
        return torch.full((batch,), v, dtype=torch.long)
    v = torch.as_tensor(v, dtype=torch.long)
    if v.ndim == 0:
        v = v.expand(batch).clone()
    if v.shape != (batch,):
        raise ValueError(f"index batch has shape {tuple(v.shape)}, expected ({batch},)")
    return v


class StepIndexError(IndexError):
    """Timestep outside [1, T]."""


def check_step(t: int, num_steps: int) -> None:
    if not 1 <= int(t) <= num_steps:
        raise StepIndexError(f"step {t} outside [1, {num_steps}]")


class ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int, groups: int = 4):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class SmallUNet(nn.Module):
    """Two-resolution conditional denoiser for (C, 32, 32)-ish images."""

    def __init__(
        self,
        image_shape: tuple[int, int, int] = (3, 32, 32),
        num_conditions: int = 8,
        num_steps: int = 50,
        base_channels: int = 16,
        emb_dim: int = 64,
    ):
        super().__init__()
        c_in, h, w = image_shape
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"image sides must be divisible by 4, got {image_shape}")
        self.image_shape = tuple(image_shape)
        self.num_conditions = num_conditions
        self.num_steps = num_steps
        self.null_condition = num_conditions
        c1, c2 = base_channels, 2 * base_channels

        self.cond_embed = nn.Embedding(num_conditions + 1, emb_dim)
        self.time_embed = nn.Embedding(num_steps + 1, emb_dim)
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        self.conv_in = nn.Conv2d(c_in, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, emb_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, emb_dim)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, emb_dim)
        self.up2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.dec2 = ResBlock(c2, emb_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(c1, emb_dim)
        self.norm_out = nn.GroupNorm(4, c1)
        self.conv_out = nn.Conv2d(c1, c_in, 3, padding=1)

    def forward(self, x, cond, t):
        b = x.shape[0]
        cond = _as_index_batch(cond, b)
        t = _as_index_batch(t, b)
        check_step(int(t.min()), self.num_steps)
        check_step(int(t.max()), self.num_steps)

        emb = self.emb_mlp(self.cond_embed(cond) + self.time_embed(t))

        h1 = self.enc1(self.conv_in(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h = self.mid(self.down2(h2), emb)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec2(h + h2, emb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec1(h + h1, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class MLPDenoiser(nn.Module):
    """Fully-connected denoiser for miniature images (down to 1 pixel)."""

    def __init__(
        self,
        image_shape: tuple[int, int, int] = (1, 2, 2),
        num_conditions: int = 2,
        num_steps: int = 3,
        hidden: int = 8,
        emb_dim: int = 4,
    ):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.num_conditions = num_conditions
        self.num_steps = num_steps
        self.null_condition = num_conditions
        dim = image_shape[0] * image_shape[1] * image_shape[2]

        self.cond_embed = nn.Embedding(num_conditions + 1, emb_dim)
        self.time_embed = nn.Embedding(num_steps + 1, emb_dim)
        self.fc1 = nn.Linear(dim + emb_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, dim)

    def forward(self, x, cond, t):
        b = x.shape[0]
        cond = _as_index_batch(cond, b)
        t = _as_index_batch(t, b)
        check_step(int(t.min()), self.num_steps)
        check_step(int(t.max()), self.num_steps)

        emb = self.cond_embed(cond) + self.time_embed(t)
        h = torch.cat([x.reshape(b, -1), emb], dim=1)
        h = torch.tanh(self.fc1(h))
        h = torch.tanh(self.fc2(h))
        return self.fc3(h).reshape(b, *self.image_shape)


def build_denoiser(arch: dict) -> nn.Module:
    """Rebuild a denoiser from its architecture record (see checkpoints)."""
    kind = arch.get("kind", "unet")
    kwargs = {k: v for k, v in arch.items() if k != "kind"}
    kwargs["image_shape"] = tuple(kwargs["image_shape"])
    if kind == "unet":
        return SmallUNet(**kwargs)
    if kind == "mlp":
        return MLPDenoiser(**kwargs)
    raise ValueError(f"unknown denoiser kind {kind!r}")


def arch_of(model: nn.Module) -> dict:
    if isinstance(model, SmallUNet):
        base = model.conv_in.out_channels
        return {
            "kind": "unet",
            "image_shape": list(model.image_shape),
            "num_conditions": model.num_conditions,
            "num_steps": model.num_steps,
            "base_channels": base,
            "emb_dim": model.cond_embed.embedding_dim,
        }
    if isinstance(model, MLPDenoiser):
        return {
            "kind": "mlp",
            "image_shape": list(model.image_shape),
            "num_conditions": model.num_conditions,
            "num_steps": model.num_steps,
            "hidden": model.fc1.out_features,
            "emb_dim": model.cond_embed.embedding_dim,
        }
    raise ValueError(f"cannot record architecture of {type(model).__name__}")
