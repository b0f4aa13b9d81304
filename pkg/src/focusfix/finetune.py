"""Region-aware reward fine-tuning.

Each step draws a batch of (condition, seed) pairs, reuses the pair's frozen
reference image and problem mask (sampled once from the base parameters with
the shared initial noise, then cached), samples the adapted model with
gradients through the last K denoising steps, and ascends

    J = r(generated) - beta * || (1 - mask) * (reference - generated) ||_F

averaged over the batch. The unconstrained baseline ("draft") is the special
case beta = 0 with an all-ones mask; the loop routes those degenerate cases
through the identical computation graph so their parameter trajectories match
the baseline's bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .masks import MaskConfig, RegionMask, extract_region, full_mask
from .rewards import saliency_heatmap
from .sampler import draw_initial_noise, sample_batch
from .schedule import ConfigurationError, NoiseSchedule
from .seeding import derive_seed, generator

log = logging.getLogger(__name__)

METHODS = ("focus_n_fix", "draft")
LOG_FIELDS = ("step", "J", "r", "penalty", "mask_area", "lr")


class FineTuneError(RuntimeError):
    pass


@dataclass
class FineTuneConfig:
    beta: float = 1e-3
    lr0: float = 2e-5
    truncate_k: int = 2
    rank: int = 64
    steps: int = 2000
    batch_size: int = 8
    method: str = "focus_n_fix"
    seed: int = 0
    cfg_weight: float = 1.0
    clamp_denoised: bool = True
    lora_init_scale: float = 0.01
    reward: str = "defect"
    num_pairs: int = 64
    smooth_kernel: int = 16
    smooth_sigma: float = 4.0
    cache_references: bool = True
    checkpoint_every: int = 0  # 0 = only at the end
    mask: MaskConfig = field(default_factory=MaskConfig)

    def validate(self, num_steps: int | None = None) -> None:
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.truncate_k < 0:
            raise ConfigurationError(f"truncate_k must be >= 0, got {self.truncate_k}")
        if num_steps is not None and self.truncate_k > num_steps:
            raise ConfigurationError(
                f"truncate_k {self.truncate_k} exceeds chain length {num_steps}"
            )
        if self.steps < 0 or self.batch_size < 1 or self.num_pairs < 1:
            raise ConfigurationError("steps, batch_size and num_pairs must be positive")

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.method == "draft" else self.beta


def regional_penalty(ref: torch.Tensor, gen: torch.Tensor, mask: torch.Tensor | RegionMask) -> torch.Tensor:
    """Frobenius norm of (1 - mask) * (ref - gen) over all channels/pixels.

    Differentiable w.r.t. ``gen`` only; the reference and mask are treated as
    constants. vector_norm's zero-subgradient at zero keeps the value safe at
    ref == gen (the exact situation at a fresh adapter).
    """
    m = mask.data if isinstance(mask, RegionMask) else mask
    if ref.shape != gen.shape:
        raise ValueError(f"shape mismatch: ref {tuple(ref.shape)} vs gen {tuple(gen.shape)}")
    keep = (1.0 - m).to(gen.dtype)
    return torch.linalg.vector_norm(keep * (ref.detach() - gen))


def penalty_batch(refs: torch.Tensor, gens: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-item regional penalties for (B, C, H, W) batches; masks (B, H, W)."""
    keep = (1.0 - masks).unsqueeze(1).to(gens.dtype)
    return torch.linalg.vector_norm(keep * (refs.detach() - gens), dim=(1, 2, 3))


def objective(r_score, penalty, beta: float):
    """J = r - beta * penalty."""
    return r_score - beta * penalty


def lr_at(lr0: float, i: int) -> float:
    """Square-root decay: lr0 / sqrt(i), 1-indexed."""
    if i < 1:
        raise ValueError(f"step index must be >= 1, got {i}")
    return lr0 / math.sqrt(i)


@dataclass
class TrainState:
    lora: torch.nn.Module
    optimizer: torch.optim.Optimizer
    step: int = 0
    reference_cache: dict = field(default_factory=dict)


def make_pairs(global_seed: int, num_pairs: int, num_conditions: int, purpose: str = "finetune"):
    """Deterministic (condition, noise-seed) list; the eval purpose draws a
    disjoint stream from the same global seed."""
    return [
        (i % num_conditions, derive_seed(global_seed, purpose, "pair", i))
        for i in range(num_pairs)
    ]


def compute_reference(base_model, schedule, reward, cond: int, seed: int, cfg: FineTuneConfig):
    """Frozen-model reference image and its problem mask for one pair."""
    dtype = next(base_model.parameters()).dtype
    x_init = draw_initial_noise((1,) + tuple(base_model.image_shape), seed, dtype)
    with torch.no_grad():
        ref = sample_batch(
            base_model,
            schedule,
            torch.tensor([cond]),
            x_init,
            truncate_k=0,
            cfg_weight=cfg.cfg_weight,
            clamp_denoised=cfg.clamp_denoised,
        )[0]
    if cfg.method == "draft":
        mask = full_mask(ref.shape[-2:])
    else:
        heatmap = reference_heatmap(reward, ref, cond, cfg)
        mask = extract_region(heatmap, cfg.mask)
        if mask.empty:
            log.debug("no problem found for pair (%d, %d); constraint covers image", cond, seed)
    return ref, mask


def reference_heatmap(reward, ref: torch.Tensor, cond: int, cfg: FineTuneConfig) -> torch.Tensor:
    """Native heatmap when the reward provides one, else gradient saliency."""
    if hasattr(reward, "heatmap_batch") and cfg.reward == "defect":
        return reward.heatmap_batch(ref.unsqueeze(0))[0]
    return saliency_heatmap(
        lambda im, c=None: reward.score_batch(im.unsqueeze(0))[0],
        ref,
        cond,
        kernel_size=cfg.smooth_kernel,
        sigma=cfg.smooth_sigma,
    )


def _gather_references(state, base_model, schedule, reward, items, cfg):
    refs, masks = [], []
    for cond, seed in items:
        key = (cond, seed)
        if cfg.cache_references and key in state.reference_cache:
            ref, mask = state.reference_cache[key]
        else:
            ref, mask = compute_reference(base_model, schedule, reward, cond, seed, cfg)
            if cfg.cache_references:
                state.reference_cache[key] = (ref, mask)
        refs.append(ref)
        masks.append(mask.data)
    return torch.stack(refs), torch.stack(masks)


def finetune_step(
    state: TrainState,
    base_model,
    schedule: NoiseSchedule,
    reward,
    items: list[tuple[int, int]],
    cfg: FineTuneConfig,
    out_dir: Path | None = None,
) -> dict:
    """One ascent step on a batch of (condition, seed) items."""
    step_index = state.step + 1
    dtype = next(state.lora.parameters()).dtype
    refs, masks = _gather_references(state, base_model, schedule, reward, items, cfg)

    conds = torch.tensor([c for c, _ in items], dtype=torch.long)
    x_init = torch.stack(
        [draw_initial_noise(tuple(base_model.image_shape), s, dtype) for _, s in items]
    )
    gens = sample_batch(
        state.lora,
        schedule,
        conds,
        x_init,
        truncate_k=cfg.truncate_k,
        cfg_weight=cfg.cfg_weight,
        clamp_denoised=cfg.clamp_denoised,
    )
    r = reward.score_batch(gens, conds)

    beta = cfg.effective_beta
    complement_present = bool((masks < 1).any())
    if beta > 0 and complement_present:
        pens = penalty_batch(refs, gens, masks)
        j = objective(r, pens, beta)
        loss = -j.mean()
    else:
        # Degenerate regional term (beta = 0 or all-ones masks): use the
        # reward-only graph so the trajectory is bit-identical to the
        # unconstrained baseline. Penalties are still logged.
        with torch.no_grad():
            pens = penalty_batch(refs, gens.detach(), masks)
        j = objective(r.detach(), pens, beta)
        loss = -r.mean()

    if torch.isnan(j).any():
        bad = int(torch.nonzero(torch.isnan(j))[0])
        dump = None
        if out_dir is not None:
            dump = Path(out_dir) / f"nan_dump_step{step_index}.pt"
            torch.save(
                {"item": items[bad], "ref": refs[bad], "gen": gens.detach()[bad], "mask": masks[bad]},
                dump,
            )
        raise FineTuneError(
            f"NaN objective at step {step_index} for item {items[bad]}"
            + (f" (dump: {dump})" if dump else "")
        )

    lr = lr_at(cfg.lr0, step_index)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step = step_index

    return {
        "step": step_index,
        "J": float(j.mean()),
        "r": float(r.detach().mean()),
        "penalty": float(pens.detach().mean()),
        "mask_area": float(masks.mean()),
        "lr": lr,
    }


def write_log_rows(path: Path, rows: list[dict], append: bool = False) -> None:
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if mode == "w":
            writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


def run_finetune(
    base_model,
    schedule: NoiseSchedule,
    reward,
    cfg: FineTuneConfig,
    out_dir: str | Path,
    resume_state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Full fine-tuning run; returns the final state and the step log.

    With ``resume_state`` the run continues from the stored step counter and
    reproduces the uninterrupted run step for step (batch selection is
    counter-seeded, so no RNG state beyond the counter is needed).
    """
    from .lora import init_lora  # local import to avoid a cycle

    cfg.validate(schedule.num_steps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if resume_state is None:
        lora = init_lora(base_model, cfg.rank, init_scale=cfg.lora_init_scale, seed=cfg.seed)
        if lora.skipped_names:
            log.info("lora skips %d weights below rank %d: %s",
                     len(lora.skipped_names), cfg.rank, ", ".join(lora.skipped_names))
        optimizer = torch.optim.AdamW(
            list(lora.lora_parameters()), lr=cfg.lr0, betas=(0.9, 0.999), weight_decay=0.0
        )
        state = TrainState(lora=lora, optimizer=optimizer)
    else:
        state = resume_state

    pairs = make_pairs(cfg.seed, cfg.num_pairs, base_model.num_conditions)
    rows: list[dict] = []
    start = state.step
    for step in range(start, cfg.steps):
        g = generator(cfg.seed, "batch", step)
        idx = torch.randint(0, len(pairs), (cfg.batch_size,), generator=g)
        items = [pairs[int(i)] for i in idx]
        row = finetune_step(state, base_model, schedule, reward, items, cfg, out_dir=out)
        rows.append(row)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _save_state(out / "state.fnfx", state, cfg)
    write_log_rows(out / "train_log.csv", rows, append=start > 0)
    _save_state(out / "state.fnfx", state, cfg)
    return state, rows


def _save_state(path: Path, state: TrainState, cfg: FineTuneConfig) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(
        path,
        {
            "kind": "finetune_state",
            "step": state.step,
            "rank": cfg.rank,
            "lora_state": state.lora.lora_state_dict(),
            "optimizer_state": state.optimizer.state_dict(),
            "method": cfg.method,
            "beta": cfg.beta,
        },
    )


def load_state(path: str | Path, base_model, cfg: FineTuneConfig) -> TrainState:
    from .checkpoint import load_checkpoint
    from .lora import init_lora

    payload = load_checkpoint(path)
    if payload.get("kind") != "finetune_state":
        raise FineTuneError(f"{path} is not a fine-tune state checkpoint")
    lora = init_lora(base_model, payload["rank"], init_scale=cfg.lora_init_scale, seed=cfg.seed)
    lora.load_lora_state_dict(payload["lora_state"])
    optimizer = torch.optim.AdamW(
        list(lora.lora_parameters()), lr=cfg.lr0, betas=(0.9, 0.999), weight_decay=0.0
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    return TrainState(lora=lora, optimizer=optimizer, step=int(payload["step"]))
