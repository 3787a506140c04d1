"""Deterministic seed fan-out.

A single master seed is expanded into independent named streams so that
adding or removing one consumer (e.g. domain-classifier init) never
perturbs another (e.g. batch shuffling).
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Hash (master_seed, purpose, ...) into a 64-bit stream seed."""
    tokens = []
    for p in parts:
        if isinstance(p, bool) or not isinstance(p, (int, str)):
            raise TypeError(f"seed parts must be int or str, got {type(p).__name__}")
        tokens.append(f"i:{p}" if isinstance(p, int) else f"s:{p}")
    digest = hashlib.sha256("\x1f".join(tokens).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts: int | str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
