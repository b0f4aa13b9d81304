"""Checkpoint container: magic + format version + SHA-256 + torch payload.

load(save(x)) reproduces every tensor bit for bit; a flipped byte anywhere in
the payload fails the checksum before anything is deserialized, and a format
version mismatch is refused with both versions named.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import torch

from . import FORMAT_VERSION

MAGIC = b"FNFX"


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, supported: int):
        super().__init__(
            f"checkpoint format version {found} is not supported (binary supports {supported})"
        )
        self.found = found
        self.supported = supported


class CheckpointCorruptError(CheckpointError):
    pass


def save_checkpoint(path: str | Path, payload: dict) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    digest = hashlib.sha256(blob).digest()
    header = MAGIC + struct.pack("<I", FORMAT_VERSION) + digest + struct.pack("<Q", len(blob))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    head_len = len(MAGIC) + 4 + 32 + 8
    if len(raw) < head_len or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path} is not a checkpoint container")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    digest = raw[8:40]
    (length,) = struct.unpack("<Q", raw[40:48])
    blob = raw[48:]
    if len(blob) != length or hashlib.sha256(blob).digest() != digest:
        raise CheckpointCorruptError(f"checksum failure reading {path}")
    return torch.load(io.BytesIO(blob), weights_only=False)


def save_diffusion(path: str | Path, model, schedule) -> None:
    from .model import arch_of

    save_checkpoint(
        path,
        {
            "kind": "diffusion",
            "arch": arch_of(model),
            "state": model.state_dict(),
            "schedule": {"num_steps": schedule.num_steps, "betas": schedule.betas},
        },
    )


def load_diffusion(path: str | Path):
    from .model import build_denoiser
    from .schedule import NoiseSchedule

    payload = load_checkpoint(path)
    if payload.get("kind") != "diffusion":
        raise CheckpointError(f"{path} is not a diffusion checkpoint")
    model = build_denoiser(payload["arch"])
    model.load_state_dict(payload["state"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    schedule = NoiseSchedule(payload["schedule"]["num_steps"], payload["schedule"]["betas"])
    return model, schedule


def save_classifier(path: str | Path, classifier) -> None:
    save_checkpoint(
        path,
        {
            "kind": "classifier",
            "channels": classifier.conv1.out_channels,
            "state": classifier.state_dict(),
        },
    )


def load_classifier(path: str | Path):
    from .rewards import DefectClassifier

    payload = load_checkpoint(path)
    if payload.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    clf = DefectClassifier(channels=payload["channels"])
    clf.load_state_dict(payload["state"])
    clf.trained = True
    clf.eval()
    for p in clf.parameters():
        p.requires_grad_(False)
    return clf


def save_lora(path: str | Path, lora, meta: dict | None = None) -> None:
    payload = {
        "kind": "lora",
        "rank": lora.rank,
        "lora_state": lora.lora_state_dict(),
    }
    if meta:
        payload["meta"] = meta
    save_checkpoint(path, payload)


def load_lora(path: str | Path, base_model, init_scale: float = 0.01, seed: int = 0):
    from .lora import init_lora

    payload = load_checkpoint(path)
    if payload.get("kind") != "lora":
        raise CheckpointError(f"{path} is not a LoRA checkpoint")
    lora = init_lora(base_model, payload["rank"], init_scale=init_scale, seed=seed)
    lora.load_lora_state_dict(payload["lora_state"])
    return lora
