"""Low-rank adaptation of denoiser weights.

Every convolutional or dense weight W0 (d x k, with conv kernels flattened to
k = in_channels * kh * kw) whose min(d, k) is at least the requested rank gets
a pair of matrices A (d x r) and B (r x k); the adapted forward pass computes
W0 z + A (B z) without materializing the dense delta. B starts at zero, so a
fresh adapter leaves the model's behavior unchanged. Base weights are frozen;
A and B are the only trainable state during fine-tuning.
"""

from __future__ import annotations

import copy
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import ConfigurationError
from .seeding import generator

log = logging.getLogger(__name__)


def weight_dims(module: nn.Module) -> tuple[int, int] | None:
    """(d, k) of the module's weight viewed as a matrix, or None if the
    module kind is not adapted."""
    if isinstance(module, nn.Linear):
        return module.out_features, module.in_features
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return module.out_channels, module.in_channels * kh * kw
    return None


class LowRankDelta(nn.Module):
    """Wraps a frozen Linear/Conv2d and adds the A(Bz) low-rank path."""

    def __init__(self, base: nn.Module, rank: int, init_scale: float, gen: torch.Generator):
        super().__init__()
        dims = weight_dims(base)
        assert dims is not None
        d, k = dims
        if rank > min(d, k):
            raise ConfigurationError(f"rank {rank} exceeds min(d, k) = {min(d, k)}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        a = torch.randn(d, rank, generator=gen, dtype=torch.float64) * init_scale
        self.A = nn.Parameter(a.to(dtype))
        self.B = nn.Parameter(torch.zeros(rank, k, dtype=dtype))

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta_weight(self) -> torch.Tensor:
        """Dense A @ B reshaped to the base weight's layout."""
        return (self.A @ self.B).reshape(self.base.weight.shape)

    def forward(self, x):
        if isinstance(self.base, nn.Linear):
            return self.base(x) + F.linear(F.linear(x, self.B), self.A)
        conv = self.base
        kh, kw = conv.kernel_size
        r = self.rank
        # B acts as a conv with r output channels, A as a 1x1 projection.
        down = F.conv2d(
            x,
            self.B.reshape(r, conv.in_channels, kh, kw),
            stride=conv.stride,
            padding=conv.padding,
            dilation=conv.dilation,
        )
        return conv(x) + F.conv2d(down, self.A.reshape(conv.out_channels, r, 1, 1))


class LoRAModel(nn.Module):
    """A denoiser with low-rank adapters attached to qualifying weights.

    Holds a deep copy of the base model, so the original checkpoint module is
    untouched and can keep serving as the frozen reference.
    """

    def __init__(
        self,
        base: nn.Module,
        rank: int,
        init_scale: float = 0.01,
        seed: int = 0,
        targets: list[str] | None = None,
    ):
        super().__init__()
        if rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {rank}")
        self.rank = rank
        self.net = copy.deepcopy(base)
        self.image_shape = base.image_shape
        self.num_conditions = base.num_conditions
        self.num_steps = base.num_steps
        self.null_condition = base.null_condition
        for p in self.net.parameters():
            p.requires_grad_(False)

        candidates: dict[str, tuple[int, int]] = {}
        for name, module in self.net.named_modules():
            dims = weight_dims(module)
            if dims is not None:
                candidates[name] = dims
        if targets is not None:
            for name in targets:
                if name not in candidates:
                    raise ConfigurationError(f"no adaptable weight named {name!r}")
                d, k = candidates[name]
                if rank > min(d, k):
                    raise ConfigurationError(
                        f"rank {rank} too large for weight {name!r} with min(d, k) = {min(d, k)}"
                    )
            selected = list(targets)
        else:
            selected = [n for n, (d, k) in candidates.items() if min(d, k) >= rank]

        self.adapted_names = selected
        self.skipped_names = [n for n in candidates if n not in selected]
        if not selected:
            widest = max(candidates.items(), key=lambda kv: min(kv[1]))
            raise ConfigurationError(
                f"rank {rank} too large for every weight; best candidate "
                f"{widest[0]!r} has min(d, k) = {min(widest[1])}"
            )
        for name in self.skipped_names:
            log.debug("lora: skipping %s (min dim < rank %d)", name, rank)

        gen = generator(seed, "lora_init")
        for name in selected:
            parent, attr = self._locate(name)
            setattr(parent, attr, LowRankDelta(getattr(parent, attr), rank, init_scale, gen))

    def _locate(self, name: str):
        parts = name.split(".")
        parent = self.net
        for p in parts[:-1]:
            parent = getattr(parent, p)
        return parent, parts[-1]

    def adapters(self) -> dict[str, LowRankDelta]:
        return {
            name: mod for name, mod in self.net.named_modules() if isinstance(mod, LowRankDelta)
        }

    def lora_parameters(self):
        for mod in self.adapters().values():
            yield mod.A
            yield mod.B

    def lora_state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, mod in self.adapters().items():
            out[f"{name}.A"] = mod.A.detach().clone()
            out[f"{name}.B"] = mod.B.detach().clone()
        return out

    def load_lora_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        adapters = self.adapters()
        expected = {f"{n}.{m}" for n in adapters for m in ("A", "B")}
        if expected != set(state):
            raise ConfigurationError("lora state keys do not match adapted weights")
        with torch.no_grad():
            for name, mod in adapters.items():
                mod.A.copy_(state[f"{name}.A"])
                mod.B.copy_(state[f"{name}.B"])

    def forward(self, x, cond, t):
        return self.net(x, cond, t)


def init_lora(
    base: nn.Module, rank: int, init_scale: float = 0.01, seed: int = 0,
    targets: list[str] | None = None,
) -> LoRAModel:
    return LoRAModel(base, rank, init_scale=init_scale, seed=seed, targets=targets)


def adapted_forward(w0: torch.Tensor, a: torch.Tensor, b: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """h = W0 z + A (B z) for a vector or a batch of row vectors z."""
    if z.shape[-1] != w0.shape[1]:
        raise ValueError(f"z has trailing dim {z.shape[-1]}, weight expects {w0.shape[1]}")
    if z.ndim == 1:
        return w0 @ z + a @ (b @ z)
    return z @ w0.T + (z @ b.T) @ a.T


def effective_params(base: nn.Module, lora: LoRAModel, scale: float = 1.0) -> nn.Module:
    """Materialize W0 + scale * A @ B into a standalone copy of the base model.

    scale 0 reproduces the checkpoint exactly; scale 1 matches the
    training-time adapted forward pass.
    """
    merged = copy.deepcopy(base)
    if scale == 0.0:
        return merged
    deltas = {name: mod.delta_weight() * scale for name, mod in lora.adapters().items()}
    modules = dict(merged.named_modules())
    with torch.no_grad():
        for name, delta in deltas.items():
            modules[name].weight.add_(delta)
    return merged
