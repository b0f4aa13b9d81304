"""Deterministic seed derivation.

One global seed fans out into independent streams (data generation, model
init, per-item sampling noise, judge noise, ...) via hashing, so adding a new
consumer never shifts the seeds of existing ones.
"""

from __future__ import annotations

import hashlib

import torch


def derive_seed(root: int, *labels: object) -> int:
    """Derive a child seed from a root seed and a label path."""
    key = ":".join([str(int(root))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def generator(root: int, *labels: object) -> torch.Generator:
    """CPU torch generator seeded from a derived seed."""
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(root, *labels))
    return g
