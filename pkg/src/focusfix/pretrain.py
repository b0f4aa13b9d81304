"""Pretraining: denoising score matching for the toy model, classifier
training for the score-only reward, and the clean-response calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import SmallUNet
from .rewards import DefectClassifier, DefectFilterReward, calibrate_defect_threshold
from .schedule import NoiseSchedule
from .seeding import derive_seed, generator

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    cond_dropout: float = 0.1
    seed: int = 0
    classifier_steps: int = 600
    classifier_lr: float = 1e-3
    classifier_channels: int = 16
    calibration_samples: int = 1000


def build_model(
    image_shape=(3, 32, 32),
    num_conditions: int = 8,
    num_steps: int = 50,
    base_channels: int = 16,
    emb_dim: int = 64,
    seed: int = 0,
) -> SmallUNet:
    """Seeded model construction (parameter init draws from the global RNG)."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "model_init"))
        model = SmallUNet(
            image_shape=image_shape,
            num_conditions=num_conditions,
            num_steps=num_steps,
            base_channels=base_channels,
            emb_dim=emb_dim,
        )
    return model


def pretrain(
    model,
    schedule: NoiseSchedule,
    images: torch.Tensor,
    conditions: torch.Tensor,
    cfg: PretrainConfig,
) -> list[float]:
    """Noise-prediction training; returns the per-step loss trajectory.

    Condition dropout replaces a fraction of condition ids with the null id so
    the unconditional branch is usable for classifier-free guidance.
    """
    if images.numel() == 0:
        raise DataError("empty dataset")
    n = images.shape[0]
    t_max = schedule.num_steps
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=1e-5)
    losses: list[float] = []
    model.train()
    for step in range(cfg.steps):
        g = generator(cfg.seed, "pretrain", step)
        idx = torch.randint(0, n, (cfg.batch_size,), generator=g)
        x0 = images[idx]
        cond = conditions[idx].clone()
        drop = torch.rand(cfg.batch_size, generator=g) < cfg.cond_dropout
        cond[drop] = model.null_condition
        t = torch.randint(1, t_max + 1, (cfg.batch_size,), generator=g)
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        gamma = schedule.gammas.to(x0.dtype)[t - 1].view(-1, 1, 1, 1)
        x_t = torch.sqrt(gamma) * x0 + torch.sqrt(1.0 - gamma) * noise
        pred = model(x_t, cond, t)
        loss = F.mse_loss(pred, noise)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss))
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, float(loss))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return losses


def smoothed(values: list[float], window: int = 50) -> list[float]:
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo : i + 1]) / (i + 1 - lo))
    return out


def train_classifier(
    images: torch.Tensor,
    defect_flags: torch.Tensor,
    cfg: PretrainConfig,
    holdout_fraction: float = 0.1,
) -> tuple[DefectClassifier, float]:
    """Binary defect classifier; returns (model, held-out accuracy)."""
    n = images.shape[0]
    if n == 0:
        raise DataError("empty dataset")
    g = generator(cfg.seed, "classifier_split")
    perm = torch.randperm(n, generator=g)
    n_hold = max(1, int(n * holdout_fraction))
    hold, train = perm[:n_hold], perm[n_hold:]

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, "classifier_init"))
        clf = DefectClassifier(channels=cfg.classifier_channels)
    opt = torch.optim.AdamW(clf.parameters(), lr=cfg.classifier_lr, weight_decay=1e-5)
    labels = defect_flags.float()
    for step in range(cfg.classifier_steps):
        gs = generator(cfg.seed, "classifier", step)
        idx = train[torch.randint(0, len(train), (cfg.batch_size,), generator=gs)]
        logits = clf(images[idx])
        loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    clf.eval()
    with torch.no_grad():
        pred = clf(images[hold]) > 0
        acc = float((pred == defect_flags[hold]).float().mean())
    clf.trained = True
    for p in clf.parameters():
        p.requires_grad_(False)
    log.info("classifier held-out accuracy %.3f on %d images", acc, n_hold)
    return clf, acc


def calibrate(
    reward: DefectFilterReward,
    images: torch.Tensor,
    defect_flags: torch.Tensor,
    cfg: PretrainConfig,
) -> dict:
    """Clean-image calibration of the defect decision threshold."""
    clean = images[~defect_flags]
    if clean.shape[0] > cfg.calibration_samples:
        clean = clean[: cfg.calibration_samples]
    return calibrate_defect_threshold(reward, clean)
