"""Preference-vote analysis: mean opinion scores, margin-based vote
classification, min aggregation, and the simulated judge panel that stands in
for human annotators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .seeding import derive_seed

VOTE_VALUES = (-1, 0, 1)
LABELS = ("improves", "degrades", "similar")


@dataclass
class VoteRecord:
    votes: list[int]

    def __post_init__(self):
        for v in self.votes:
            if v not in VOTE_VALUES:
                raise ValueError(f"vote {v} not in {VOTE_VALUES}")


def mos(record: VoteRecord) -> float:
    """Mean opinion score: arithmetic mean of {-1, 0, +1} votes."""
    if not record.votes:
        raise ValueError("mos of an empty vote record")
    return sum(record.votes) / len(record.votes)


def vote_classify(record: VoteRecord, margin: int = 3) -> str:
    """improves/degrades when the signed vote difference reaches the margin,
    else similar."""
    if margin < 1:
        raise ValueError(f"margin must be >= 1, got {margin}")
    pos = sum(1 for v in record.votes if v == 1)
    neg = sum(1 for v in record.votes if v == -1)
    if pos - neg >= margin:
        return "improves"
    if neg - pos >= margin:
        return "degrades"
    return "similar"


def min_aggregate(mos_a: list[float], mos_b: list[float]) -> float:
    """Mean over items of min(a_i, b_i)."""
    if len(mos_a) != len(mos_b):
        raise ValueError(f"length mismatch: {len(mos_a)} vs {len(mos_b)}")
    if not mos_a:
        raise ValueError("min_aggregate of empty lists")
    return float(np.mean([min(x, y) for x, y in zip(mos_a, mos_b)]))


@dataclass
class JudgeConfig:
    num_judges: int = 11
    pos_threshold: float = 0.05
    neg_threshold: float = 0.05
    noise_sigma: float = 0.02
    seed: int = 0


def simulated_judge(
    ref: torch.Tensor,
    gen: torch.Tensor,
    reward_fn,
    cfg: JudgeConfig,
    item_id: object = 0,
) -> VoteRecord:
    """Panel of threshold judges on the reward delta r(gen) - r(ref).

    Each judge perturbs the delta with its own seeded Gaussian noise, then
    votes +1 above the positive threshold, -1 below the negative one, else 0.
    """
    with torch.no_grad():
        delta = float(reward_fn(gen) - reward_fn(ref))
    votes = []
    for j in range(cfg.num_judges):
        if cfg.noise_sigma > 0:
            rng = np.random.default_rng(derive_seed(cfg.seed, "judge", item_id, j))
            seen = delta + cfg.noise_sigma * rng.standard_normal()
        else:
            seen = delta
        if seen > cfg.pos_threshold:
            votes.append(1)
        elif seen < -cfg.neg_threshold:
            votes.append(-1)
        else:
            votes.append(0)
    return VoteRecord(votes)
