"""Shared fixtures.

Miniature fixtures (MLP denoiser, 3-step schedule, float64) back the
finite-difference oracles; the session-scoped toy assets build a small real
dataset and classifier once for the tests that need trained components.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from focusfix.data import NUM_CONDITIONS, checkerboard_patch, render_shape
from focusfix.model import MLPDenoiser
from focusfix.pretrain import PretrainConfig, train_classifier
from focusfix.schedule import make_schedule
from focusfix.seeding import derive_seed


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule(3, (0.05, 0.3), dtype=torch.float64)


@pytest.fixture()
def mlp_model():
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(7, "mlp"))
        model = MLPDenoiser(image_shape=(1, 2, 2), num_conditions=2, num_steps=3, hidden=6, emb_dim=4)
    return model.double()


@pytest.fixture()
def scalar_model():
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(11, "scalar"))
        model = MLPDenoiser(image_shape=(1, 1, 1), num_conditions=2, num_steps=3, hidden=5, emb_dim=3)
    return model.double()


def make_toy_images(n: int, seed: int = 0, p_defect: float = 0.5, size: int = 32):
    """In-memory shape images with known defect placement."""
    rng = np.random.default_rng(seed)
    imgs, conds, flags, boxes = [], [], [], []
    for i in range(n):
        cond = i % NUM_CONDITIONS
        img = render_shape(cond, rng, size=size)
        defect = bool(rng.random() < p_defect)
        box = None
        if defect:
            hi = (size - 6) // 2
            r = int(rng.integers(0, hi + 1)) * 2
            c = int(rng.integers(0, hi + 1)) * 2
            img[:, r : r + 6, c : c + 6] = checkerboard_patch(invert=bool(rng.integers(0, 2)))
            box = (r, c, 6, 6)
        imgs.append(img)
        conds.append(cond)
        flags.append(defect)
        boxes.append(box)
    return (
        torch.from_numpy(np.stack(imgs)),
        torch.tensor(conds),
        torch.tensor(flags),
        boxes,
    )


@pytest.fixture(scope="session")
def toy_assets():
    """Small real dataset plus a trained defect classifier."""
    images, conds, flags, boxes = make_toy_images(768, seed=123, p_defect=0.5)
    cfg = PretrainConfig(classifier_steps=400, batch_size=64, seed=5)
    classifier, acc = train_classifier(images, flags, cfg)
    return {
        "images": images,
        "conditions": conds,
        "defects": flags,
        "bboxes": boxes,
        "classifier": classifier,
        "accuracy": acc,
    }
