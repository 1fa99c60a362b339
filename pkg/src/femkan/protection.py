"""Cancelable template protection: PolyProtect and MLP-Hash.

PolyProtect maps each window of ``m`` consecutive embedding values through a
user-specific power sum ``sum_k c_k * v_k ** e_k``.  MLP-Hash projects the
embedding through seeded, row-orthonormalised uniform matrices with negative
clipping, then binarises against a threshold.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np


class DegenerateMatrixError(np.linalg.LinAlgError):
    """Rows of the matrix are (numerically) linearly dependent."""


# ----------------------------------------------------------------------------
# PolyProtect
# ----------------------------------------------------------------------------

@dataclass
class PolyProtectParams:
    C: List[int]
    E: List[int]
    overlap: int = 4

    def __post_init__(self):
        self.C = [int(c) for c in self.C]
        self.E = [int(e) for e in self.E]
        if len(self.C) != len(self.E) or not self.C:
            raise ValueError("C and E must be nonempty and of equal length")
        if any(c == 0 for c in self.C):
            raise ValueError("PolyProtect coefficients must be nonzero")
        if any(e < 1 for e in self.E):
            raise ValueError("PolyProtect exponents must be positive")
        if not 0 <= self.overlap < self.m:
            raise ValueError(f"overlap must lie in [0, {self.m - 1}]")

    @property
    def m(self) -> int:
        return len(self.C)

    @property
    def step(self) -> int:
        return self.m - self.overlap

    def as_dict(self) -> dict:
        return asdict(self)


def polyprotect_gen(seed, m: int = 5, overlap: int = 4, c_range: int = 50,
                    e_max: int = 5) -> PolyProtectParams:
    """User-specific (C, E): C uniform over nonzero integers in [-c_range, c_range],
    E a random permutation of 1..e_max (needs ``m == e_max``) or uniform draws otherwise."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    choices = np.concatenate([np.arange(-c_range, 0), np.arange(1, c_range + 1)])
    C = rng.choice(choices, size=m)
    if m == e_max:
        E = rng.permutation(np.arange(1, e_max + 1))
    else:
        E = rng.integers(1, e_max + 1, size=m)
    return PolyProtectParams(C.tolist(), E.tolist(), overlap)


def polyprotect_output_dim(n: int, m: int = 5, overlap: int = 4) -> int:
    step = m - overlap
    return (n - m) // step + 1


def polyprotect(v, params: PolyProtectParams) -> np.ndarray:
    """Protect a vector (or each row of a 2-D batch) with one parameter set."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[-1]
    m = params.m
    if n < m:
        raise ValueError(f"embedding length {n} is shorter than the window size {m}")
    starts = np.arange(0, n - m + 1, params.step)
    windows = v[..., starts[:, None] + np.arange(m)]          # (..., n_out, m)
    C = np.asarray(params.C, dtype=np.float64)
    E = np.asarray(params.E)
    return np.sum(C * windows ** E, axis=-1)


# ----------------------------------------------------------------------------
# MLP-Hash
# ----------------------------------------------------------------------------

def gram_schmidt_rows(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Classic sequential Gram-Schmidt over the rows of ``M`` (float64).

    Each row is re-orthogonalised once more against its predecessors, which
    keeps the 512x512 case orthonormal to ~1e-15 without changing the result.
    """
    M = np.array(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] > M.shape[1]:
        raise ValueError(f"need a 2-D matrix with rows <= cols, got {M.shape}")
    Q = np.zeros_like(M)
    for i in range(M.shape[0]):
        r = M[i].copy()
        for _ in range(2):
            r -= Q[:i].T @ (Q[:i] @ r)
        norm = np.linalg.norm(r)
        if norm < tol:
            raise DegenerateMatrixError(f"row {i} is linearly dependent on the previous rows")
        Q[i] = r / norm
    return Q


@dataclass
class MlpHashParams:
    seed: int
    layer_widths: List[int] = field(default_factory=lambda: [512])
    tau: float = 0.0

    def __post_init__(self):
        self.seed = int(self.seed)
        self.layer_widths = [int(w) for w in self.layer_widths]
        if not self.layer_widths or min(self.layer_widths) <= 0:
            raise ValueError("MLP-Hash needs at least one positive layer width")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def as_dict(self) -> dict:
        return asdict(self)


def mlphash_matrices(params: MlpHashParams, in_dim: int) -> List[np.ndarray]:
    """Seeded uniform-[0, 1] matrices with orthonormalised rows, one per hidden layer."""
    rng = np.random.default_rng(params.seed)
    mats = []
    d = in_dim
    for w in params.layer_widths:
        M = rng.uniform(0.0, 1.0, size=(d, w))
        # a narrowing layer cannot have d orthonormal rows of length w < d;
        # its columns are orthonormalised instead
        mats.append(gram_schmidt_rows(M) if d <= w else gram_schmidt_rows(M.T).T)
        d = w
    return mats


def mlphash(v, params: MlpHashParams, matrices: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Binary MLP-Hash of a vector or each row of a batch (uint8 in {0, 1})."""
    v = np.asarray(v, dtype=np.float64)
    if matrices is None:
        matrices = mlphash_matrices(params, v.shape[-1])
    p = v
    for M in matrices:
        if p.shape[-1] != M.shape[0]:
            raise ValueError(f"input dim {p.shape[-1]} does not match layer input {M.shape[0]}")
        p = np.maximum(p @ M, 0.0)
    return (p > params.tau).astype(np.uint8)


# ----------------------------------------------------------------------------
# padding
# ----------------------------------------------------------------------------

def pad_to_dim(p, target: int = 512) -> np.ndarray:
    """Append zeros along the last axis up to ``target``."""
    p = np.asarray(p)
    n = p.shape[-1]
    if n > target:
        raise ValueError(f"vector of length {n} exceeds target length {target}")
    pad = [(0, 0)] * (p.ndim - 1) + [(0, target - n)]
    return np.pad(p, pad)


def protect_batch(x: np.ndarray, labels: np.ndarray, scheme: str, seed: int,
                  target_dim: Optional[int] = None, mlphash_params: Optional[MlpHashParams] = None):
    """Protect each row of ``x`` and pad back to ``target_dim``.

    PolyProtect draws one parameter set per identity label from
    ``(seed, label)``; MLP-Hash uses one seed for everybody.  Returns the
    padded float32 array and a JSON-friendly description of the parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    target_dim = target_dim or x.shape[1]
    if scheme == "polyprotect":
        out = []
        per_id = {}
        for lab in np.unique(labels):
            per_id[int(lab)] = polyprotect_gen(np.random.default_rng([seed, int(lab)]))
        for row, lab in zip(x, labels):
            out.append(polyprotect(row, per_id[int(lab)]))
        out = np.array(out).reshape(len(x), -1)
        info = {"scheme": "polyprotect", "seed": seed, "protected_dim": out.shape[1],
                "params": {str(k): p.as_dict() for k, p in per_id.items()}}
    elif scheme == "mlphash":
        params = mlphash_params or MlpHashParams(seed)
        out = mlphash(x, params).astype(np.float64)
        info = {"scheme": "mlphash", "protected_dim": out.shape[1], "params": params.as_dict()}
    else:
        raise ValueError(f"unknown protection scheme {scheme!r}")
    info["padded_dim"] = target_dim
    return pad_to_dim(out, target_dim).astype(np.float32), info
