"""Partial-template leakage: keep a prefix of each embedding, zero the rest."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LeakageSpec:
    fraction: float
    total_dim: int = 512
    rounding: str = "half_up"      # or "floor"

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"leak fraction must lie in (0, 1], got {self.fraction}")
        if self.rounding not in ("half_up", "floor"):
            raise ValueError(f"unknown rounding rule {self.rounding!r}")
        if self.kept < 1:
            raise ValueError("leak spec keeps no coordinates")

    @property
    def kept(self) -> int:
        x = self.fraction * self.total_dim
        # nudge guards values like 0.3 * 512 = 153.6000000002
        return math.floor(x + 0.5 + 1e-9) if self.rounding == "half_up" else math.floor(x + 1e-9)


def leak(v, spec: LeakageSpec) -> np.ndarray:
    """Zero everything after the first ``spec.kept`` entries (last axis)."""
    v = np.asarray(v)
    if v.shape[-1] != spec.total_dim:
        raise ValueError(f"embedding length {v.shape[-1]} != leak spec dim {spec.total_dim}")
    out = v.copy()
    out[..., spec.kept:] = 0
    return out
