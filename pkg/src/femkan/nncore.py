"""Dense layers, activations, optimizers and gradient checking.

Every layer follows the same protocol: ``forward(x)`` caches what the
backward pass needs, ``backward(grad_out)`` accumulates parameter gradients
and returns the gradient wrt the input.  Parameters default to float32;
``astype(np.float64)`` produces the 64-bit shadow copy used by gradient checks.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class DivergedError(FloatingPointError):
    """Raised when training produces non-finite values."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


def _check_cols(x: np.ndarray, n: int, who: str) -> None:
    if x.ndim != 2 or x.shape[1] != n:
        raise ShapeError(f"{who}: expected input of shape (batch, {n}), got {x.shape}")


def kaiming_uniform(rng: np.random.Generator, fan_out: int, fan_in: int,
                    dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x ** 3)))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return grad_out * (s * (1.0 + x * (1.0 - s)))


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

class Layer:
    """Base class: named parameters with matching gradient buffers."""

    training: bool = True

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def grads(self) -> Dict[str, np.ndarray]:
        return {}

    def zero_grad(self) -> None:
        for g in self.grads().values():
            g.fill(0)

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def astype(self, dtype) -> "Layer":
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=DEFAULT_DTYPE):
        if in_features <= 0 or out_features <= 0:
            raise ValueError(f"invalid Linear shape {in_features}->{out_features}")
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = kaiming_uniform(rng, out_features, in_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x: Optional[np.ndarray] = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x):
        _check_cols(x, self.in_features, "Linear")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        x = self._x
        if x is None:
            raise RuntimeError("Linear.backward called before forward")
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"Linear.backward: grad_out {grad_out.shape} does not match "
                             f"output shape {(x.shape[0], self.out_features)}")
        self.grad_weight += grad_out.T @ x
        self.grad_bias += grad_out.sum(axis=0, dtype=np.float64).astype(self.grad_bias.dtype)
        return grad_out @ self.weight

    def astype(self, dtype):
        new = Linear.__new__(Linear)
        new.in_features, new.out_features = self.in_features, self.out_features
        new.weight = self.weight.astype(dtype)
        new.bias = self.bias.astype(dtype)
        new.grad_weight = np.zeros_like(new.weight)
        new.grad_bias = np.zeros_like(new.bias)
        new.training = self.training
        new._x = None
        return new


class GELU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return gelu(x)

    def backward(self, grad_out):
        return gelu_backward(self._x, grad_out)

    def astype(self, dtype):
        return GELU()


class BatchNorm1d(Layer):
    """Batch normalisation over the batch axis of a (batch, features) input.

    Running variance is updated with the unbiased batch variance, normalisation
    uses the biased one (the usual convention).
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(num_features, dtype=dtype)
        self.beta = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self.training = True
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        _check_cols(x, self.num_features, "BatchNorm1d")
        dt = x.dtype
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValueError("BatchNorm1d needs batch >= 2 in train mode")
            mean = x.mean(axis=0, dtype=np.float64)
            var = ((x - mean) ** 2).mean(axis=0, dtype=np.float64)
            self.running_mean[:] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[:] = ((1 - self.momentum) * self.running_var
                                   + self.momentum * var * n / (n - 1))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = ((x - mean) * inv_std).astype(dt)
            self._cache = (xhat, inv_std.astype(dt))
        else:
            inv_std = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
            xhat = ((x - self.running_mean) * inv_std).astype(dt)
            self._cache = (xhat, inv_std.astype(dt))
        return self.gamma * xhat + self.beta

    def backward(self, grad_out):
        xhat, inv_std = self._cache
        self.grad_gamma += (grad_out * xhat).sum(axis=0, dtype=np.float64).astype(self.grad_gamma.dtype)
        self.grad_beta += grad_out.sum(axis=0, dtype=np.float64).astype(self.grad_beta.dtype)
        gx = grad_out * self.gamma
        if not self.training:
            return gx * inv_std
        m1 = gx.mean(axis=0, dtype=np.float64)
        m2 = (gx * xhat).mean(axis=0, dtype=np.float64)
        return (inv_std * (gx - m1 - xhat * m2)).astype(grad_out.dtype)

    def astype(self, dtype):
        new = BatchNorm1d(self.num_features, self.eps, self.momentum, dtype)
        new.gamma[:] = self.gamma
        new.beta[:] = self.beta
        new.running_mean[:] = self.running_mean
        new.running_var[:] = self.running_var
        new.training = self.training
        return new


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)
        self.training = True

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params().items():
                out[f"{i}.{k}"] = v
        return out

    def grads(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads().items():
                out[f"{i}.{k}"] = v
        return out

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def train(self, mode=True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def astype(self, dtype):
        new = Sequential(layer.astype(dtype) for layer in self.layers)
        new.training = self.training
        return new


# ----------------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------------

def _check_finite(grads: Dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient in parameter {name!r}", name)


class SGD:
    """Plain SGD with optional momentum and coupled L2 decay.

    ``lr_decay_gamma`` multiplies the learning rate at every ``epoch_end``.
    """

    kind = "SGD"

    def __init__(self, lr: float = 1e-2, momentum: float = 0.0, weight_decay: float = 0.0,
                 lr_decay_gamma: float = 1.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < lr_decay_gamma <= 1.0:
            raise ValueError("lr_decay_gamma must lie in (0, 1]")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_gamma = lr_decay_gamma
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            if self.momentum:
                v = self.velocity.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g
                g = v
            p -= (self.lr * g).astype(p.dtype, copy=False)

    def epoch_end(self) -> None:
        self.lr *= self.lr_decay_gamma


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    kind = "AdamW"

    def __init__(self, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2, lr_decay_gamma: float = 0.8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < lr_decay_gamma <= 1.0:
            raise ValueError("lr_decay_gamma must lie in (0, 1]")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_decay_gamma = lr_decay_gamma
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        _check_finite(grads)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= p.dtype.type(1.0 - self.lr * self.weight_decay)
            step = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= step.astype(p.dtype, copy=False)

    def epoch_end(self) -> None:
        self.lr *= self.lr_decay_gamma


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------

REL_ERROR_FLOOR = 1e-6


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = REL_ERROR_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that are exactly zero (a bias feeding a
    train-mode batchnorm, say) from turning central-difference round-off
    (~1e-11) into a large relative error.
    """
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4,
                 stencil: int = 5) -> np.ndarray:
    """Central differences of scalar ``f()`` wrt every entry of ``x`` (perturbed in place).

    ``stencil=5`` uses the fourth-order formula
    (-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h, whose truncation error is
    negligible at h = 1e-4, so round-off alone sets the accuracy.
    ``stencil=3`` is the classic (f(x+h) - f(x-h)) / 2h.
    """
    if stencil == 3:
        offsets, weights, denom = (1, -1), (1.0, -1.0), 2.0 * h
    elif stencil == 5:
        offsets, weights, denom = (2, 1, -1, -2), (-1.0, 8.0, -8.0, 1.0), 12.0 * h
    else:
        raise ValueError("stencil must be 3 or 5")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        acc = 0.0
        for o, w in zip(offsets, weights):
            flat[i] = old + o * h
            v = f()
            if not math.isfinite(v):
                flat[i] = old
                raise FloatingPointError("objective is not finite near the check point")
            acc += w * v
        flat[i] = old
        g[i] = acc / denom
    return grad


def grad_check(f: Callable[[], float], params: Dict[str, np.ndarray],
               analytic: Dict[str, np.ndarray], h: float = 1e-4, stencil: int = 5) -> dict:
    """Compare analytic gradients against central differences.

    ``f`` re-evaluates the scalar objective reading ``params`` in place; the
    arrays must be float64.  Returns the max relative error overall and per
    parameter.
    """
    if not math.isfinite(f()):
        raise FloatingPointError("objective is not finite at the check point")
    per = {}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name!r} is {p.dtype}")
        num = numeric_grad(f, p, h, stencil)
        per[name] = float(rel_error(analytic[name], num).max()) if p.size else 0.0
    return {"max_rel_error": max(per.values(), default=0.0), "per_param": per}
