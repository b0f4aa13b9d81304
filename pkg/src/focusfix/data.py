"""Synthetic training distribution: colored shapes with localized defects.

Images are 3-channel squares in [-1, 1] showing one filled shape on a dark
background; the condition id encodes shape x color (8 combinations). A fixed
fraction of images carries the failure mode the rewards target: a small
high-contrast checkerboard patch pasted at a random grid-aligned location.

The generator writes lossless PNGs plus a JSON-lines manifest recording
condition id, defect flag and defect bounding box per image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = (
    (0.85, -0.15, -0.45),  # warm
    (-0.35, 0.25, 0.90),  # cool
)
NUM_CONDITIONS = len(SHAPES) * len(COLORS)
BACKGROUND = -0.80
DEFECT_SIZE = 6
DEFECT_CELL = 2
DEFECT_AMPLITUDE = 0.95


@dataclass
class ManifestEntry:
    index: int
    file: str
    condition: int
    defect: bool
    bbox: tuple[int, int, int, int] | None  # row, col, height, width


def condition_name(cond: int) -> str:
    shape = SHAPES[cond // len(COLORS)]
    color = "warm" if cond % len(COLORS) == 0 else "cool"
    return f"{shape}/{color}"


def checkerboard_patch(size: int = DEFECT_SIZE, cell: int = DEFECT_CELL, invert: bool = False) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    sign = np.where(((ii // cell + jj // cell) % 2) == 0, 1.0, -1.0)
    if invert:
        sign = -sign
    return (DEFECT_AMPLITUDE * sign).astype(np.float32)


def render_shape(cond: int, rng: np.random.Generator, size: int = 32, supersample: int = 4) -> np.ndarray:
    """One clean image (3, size, size) in [-1, 1] with anti-aliased edges."""
    shape = SHAPES[cond // len(COLORS)]
    color = np.array(COLORS[cond % len(COLORS)], dtype=np.float32)
    s = size * supersample
    cy = (size / 2 + rng.uniform(-2.0, 2.0)) * supersample
    cx = (size / 2 + rng.uniform(-2.0, 2.0)) * supersample
    half = (size / 4 + rng.uniform(-2.0, 2.0)) * supersample

    yy, xx = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        inside = dy**2 + dx**2 <= half**2
    elif shape == "square":
        inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif shape == "diamond":
        inside = np.abs(dy) + np.abs(dx) <= half
    else:  # upward triangle
        inside = (dy <= half / 2) & (np.abs(dx) <= (dy + half) * 0.6) & (dy >= -half)

    mask = inside.astype(np.float32).reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    bg = BACKGROUND + rng.uniform(-0.05, 0.05)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        img[c] = bg + mask * (color[c] - bg)
    return img


def apply_defect(img: np.ndarray, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Paste a checkerboard patch at a uniformly drawn grid-aligned spot."""
    size = img.shape[1]
    hi = (size - DEFECT_SIZE) // DEFECT_CELL
    r = int(rng.integers(0, hi + 1)) * DEFECT_CELL
    c = int(rng.integers(0, hi + 1)) * DEFECT_CELL
    patch = checkerboard_patch(invert=bool(rng.integers(0, 2)))
    img[:, r : r + DEFECT_SIZE, c : c + DEFECT_SIZE] = patch
    return (r, c, DEFECT_SIZE, DEFECT_SIZE)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 127.5 - 1.0


def generate_dataset(
    out_dir: str | Path,
    num_images: int = 4096,
    seed: int = 0,
    p_defect: float = 0.3,
    image_size: int = 32,
) -> list[ManifestEntry]:
    """Render the dataset to ``out_dir`` (PNGs + manifest.jsonl)."""
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries: list[ManifestEntry] = []
    with open(out / "manifest.jsonl", "w") as fh:
        for i in range(num_images):
            cond = i % NUM_CONDITIONS
            img = render_shape(cond, rng, size=image_size)
            bbox = None
            has_defect = bool(rng.random() < p_defect)
            if has_defect:
                bbox = apply_defect(img, rng)
            rel = f"images/img_{i:05d}.png"
            Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(out / rel)
            entry = ManifestEntry(i, rel, cond, has_defect, bbox)
            entries.append(entry)
            fh.write(
                json.dumps(
                    {
                        "index": entry.index,
                        "file": entry.file,
                        "condition": entry.condition,
                        "defect": entry.defect,
                        "bbox": list(bbox) if bbox else None,
                    }
                )
                + "\n"
            )
    return entries


class DatasetError(RuntimeError):
    pass


def load_dataset(data_dir: str | Path):
    """Read images and labels back; returns (images, conditions, defect flags, bboxes)."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no manifest at {manifest}")
    images, conds, defects, bboxes = [], [], [], []
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            arr = np.asarray(Image.open(data_dir / rec["file"]), dtype=np.uint8)
            images.append(from_uint8(arr).transpose(2, 0, 1))
            conds.append(rec["condition"])
            defects.append(bool(rec["defect"]))
            bboxes.append(tuple(rec["bbox"]) if rec["bbox"] else None)
    if not images:
        raise DatasetError(f"manifest {manifest} is empty")
    return (
        torch.from_numpy(np.stack(images)),
        torch.tensor(conds, dtype=torch.long),
        torch.tensor(defects, dtype=torch.bool),
        bboxes,
    )
