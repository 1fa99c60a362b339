"""B-spline bases and Kolmogorov-Arnold layers.

Each edge (i -> j) of a KAN layer carries the learnable univariate function

    phi_ji(x) = base_weight[j, i] * silu(x)
                + spline_scaler[j, i] * sum_t spline_weight[j, i, t] * B_t(x)

and outputs are sums of edge functions.  The per-edge ``spline_scaler`` is the
efficient-kan parametrisation; it keeps the spline path's gradient scale
independent of fan-in, which plain SGD needs.  ``scale_spline=False`` drops it
(scaler fixed at one, not trained).  The spline grid is uniform and static.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .nncore import DEFAULT_DTYPE, Layer, ShapeError, _check_cols, silu, silu_backward


@dataclass(frozen=True)
class SplineGrid:
    grid_size: int = 5
    order: int = 3
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if not self.hi > self.lo:
            raise ValueError("grid range must satisfy lo < hi")

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.grid_size

    @property
    def knots(self) -> np.ndarray:
        k = self.order
        return self.lo + self.step * np.arange(-k, self.grid_size + k + 1, dtype=np.float64)


def _bases_upto(x: np.ndarray, grid: SplineGrid, order: int) -> np.ndarray:
    """Cox-de Boor recursion up to ``order`` on the extended knot vector.

    ``x`` has any shape; the result appends an axis of length
    ``len(knots) - 1 - order``.
    """
    t = grid.knots.astype(x.dtype)
    xe = x[..., None]
    b = ((xe >= t[:-1]) & (xe < t[1:])).astype(x.dtype)
    for p in range(1, order + 1):
        left = (xe - t[: -(p + 1)]) / (t[p:-1] - t[: -(p + 1)])
        right = (t[p + 1:] - xe) / (t[p + 1:] - t[1:-p])
        b = left * b[..., :-1] + right * b[..., 1:]
    return b


def bspline_basis(x, grid: SplineGrid = SplineGrid()) -> np.ndarray:
    """All ``G + k`` order-k B-spline basis values at ``x``.

    Works elementwise on arrays (basis axis appended last).  Outside the
    extended knot span every basis function is zero.
    """
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    return _bases_upto(x, grid, grid.order)


def bspline_basis_and_derivative(x: np.ndarray, grid: SplineGrid):
    k = grid.order
    if k == 0:
        b = _bases_upto(x, grid, 0)
        return b, np.zeros_like(b)
    lower = _bases_upto(x, grid, k - 1)
    t = grid.knots.astype(x.dtype)
    xe = x[..., None]
    left = (xe - t[: -(k + 1)]) / (t[k:-1] - t[: -(k + 1)])
    right = (t[k + 1:] - xe) / (t[k + 1:] - t[1:-k])
    b = left * lower[..., :-1] + right * lower[..., 1:]
    # B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1}
    db = (k / (t[k:-1] - t[: -(k + 1)])) * lower[..., :-1] \
        - (k / (t[k + 1:] - t[1:-k])) * lower[..., 1:]
    return b, db


class KanLayer(Layer):
    def __init__(self, in_features: int, out_features: int, grid: SplineGrid = SplineGrid(),
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE,
                 scale_spline: bool = True):
        if in_features <= 0 or out_features <= 0:
            raise ValueError(f"invalid KanLayer shape {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.grid = grid
        rng = rng if rng is not None else np.random.default_rng(0)
        self.scale_spline = scale_spline
        # kaiming-uniform with a=sqrt(5), i.e. bound 1/sqrt(fan_in)
        bound = 1.0 / math.sqrt(in_features)
        self.base_weight = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        scale = 0.1 / grid.grid_size
        self.spline_weight = rng.uniform(
            -scale, scale, (out_features, in_features, grid.n_basis)).astype(dtype)
        if scale_spline:
            self.spline_scaler = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        else:
            self.spline_scaler = np.ones((out_features, in_features), dtype=dtype)
        self._zero_grads()
        self._cache = None

    def _zero_grads(self):
        self.grad_base_weight = np.zeros_like(self.base_weight)
        self.grad_spline_weight = np.zeros_like(self.spline_weight)
        self.grad_spline_scaler = np.zeros_like(self.spline_scaler)

    def params(self):
        out = {"base_weight": self.base_weight, "spline_weight": self.spline_weight}
        if self.scale_spline:
            out["spline_scaler"] = self.spline_scaler
        return out

    def grads(self):
        out = {"base_weight": self.grad_base_weight, "spline_weight": self.grad_spline_weight}
        if self.scale_spline:
            out["spline_scaler"] = self.grad_spline_scaler
        return out

    def effective_spline_weight(self) -> np.ndarray:
        return self.spline_weight * self.spline_scaler[..., None]

    def forward(self, x):
        _check_cols(x, self.in_features, "KanLayer")
        basis, dbasis = bspline_basis_and_derivative(x, self.grid)
        n = x.shape[0]
        flat = basis.reshape(n, -1)
        sx = silu(x)
        self._cache = (x, sx, flat, dbasis)
        out = sx @ self.base_weight.T
        out += flat @ self.effective_spline_weight().reshape(self.out_features, -1).T
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("KanLayer.backward called before forward")
        x, sx, flat, dbasis = self._cache
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"KanLayer.backward: grad_out {grad_out.shape} does not match "
                             f"output shape {(x.shape[0], self.out_features)}")
        sw = self.effective_spline_weight().reshape(self.out_features, -1)
        self.grad_base_weight += grad_out.T @ sx
        g_eff = (grad_out.T @ flat).reshape(self.spline_weight.shape)
        self.grad_spline_weight += g_eff * self.spline_scaler[..., None]
        if self.scale_spline:
            self.grad_spline_scaler += np.einsum("jit,jit->ji", g_eff, self.spline_weight)
        grad_in = silu_backward(x, grad_out @ self.base_weight)
        g_basis = (grad_out @ sw).reshape(dbasis.shape)
        grad_in += np.einsum("bit,bit->bi", g_basis, dbasis)
        return grad_in

    def astype(self, dtype):
        new = KanLayer.__new__(KanLayer)
        new.in_features, new.out_features, new.grid = self.in_features, self.out_features, self.grid
        new.scale_spline = self.scale_spline
        new.base_weight = self.base_weight.astype(dtype)
        new.spline_weight = self.spline_weight.astype(dtype)
        new.spline_scaler = self.spline_scaler.astype(dtype)
        new._zero_grads()
        new.training = self.training
        new._cache = None
        return new


def kan_init(widths: Sequence[int], grid: SplineGrid = SplineGrid(), seed: int = 0,
             dtype=DEFAULT_DTYPE, scale_spline: bool = True) -> List[KanLayer]:
    """Build the layer list for a KAN with the given width sequence."""
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("a KAN needs at least an input and an output width")
    rng = np.random.default_rng(seed)
    return [KanLayer(a, b, grid, rng, dtype, scale_spline) for a, b in zip(widths[:-1], widths[1:])]
