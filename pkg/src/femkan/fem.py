"""Face-embedding mapping networks, the joint loss and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .kan import KanLayer, SplineGrid, kan_init
from .nncore import (DEFAULT_DTYPE, GELU, SGD, AdamW, BatchNorm1d, DivergedError, Linear,
                     Sequential, ShapeError)

log = logging.getLogger(__name__)

PAPER_WIDTHS = (512, 1024, 3072, 512)
PAPER_LAMBDAS = (1.0, 0.5, 10.0)

# ablation presets: PD only, PD + CED, full joint loss
LOSS_PRESETS = {
    "pd": (0.0, 0.5, 0.0),
    "pd+ced": (0.0, 0.5, 10.0),
    "full": PAPER_LAMBDAS,
    "mse": (1.0, 0.0, 0.0),
}


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------

def _pair(e, e_hat) -> Tuple[np.ndarray, np.ndarray]:
    e = np.asarray(e, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e.shape != e_hat.shape:
        raise ShapeError(f"embedding shapes differ: {e.shape} vs {e_hat.shape}")
    return e, e_hat


def loss_mse(e, e_hat) -> float:
    e, e_hat = _pair(e, e_hat)
    return float(np.mean((e - e_hat) ** 2))


def loss_pd(e, e_hat) -> float:
    e, e_hat = _pair(e, e_hat)
    return float(np.linalg.norm(e - e_hat))


def loss_ced(e, e_hat) -> float:
    e, e_hat = _pair(e, e_hat)
    ne, nh = np.linalg.norm(e), np.linalg.norm(e_hat)
    if ne == 0 or nh == 0:
        raise ZeroDivisionError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(e, e_hat) / (ne * nh))


@dataclass
class LossBreakdown:
    mse: float
    pd: float
    ced: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def joint_loss(e, e_hat, lambdas: Sequence[float] = PAPER_LAMBDAS,
               with_grad: bool = False):
    """Weighted MSE + pairwise-distance + cosine-distance loss over a batch.

    Per-sample losses are averaged over the batch.  With ``with_grad`` the
    gradient wrt ``e_hat`` is returned as well (float64).
    """
    e, e_hat = _pair(e, e_hat)
    if e.ndim == 1:
        e, e_hat = e[None], e_hat[None]
    if e.ndim != 2 or e.shape[0] == 0:
        raise ShapeError(f"expected a nonempty (batch, dim) array, got {e.shape}")
    l1, l2, l3 = lambdas
    if min(lambdas) < 0:
        raise ValueError("loss weights must be nonnegative")
    b, n = e.shape
    diff = e_hat - e
    mse = np.mean(diff ** 2, axis=1)
    dist = np.linalg.norm(diff, axis=1)
    ne = np.linalg.norm(e, axis=1)
    nh = np.linalg.norm(e_hat, axis=1)
    if np.any(ne == 0) or np.any(nh == 0):
        raise ZeroDivisionError("cosine distance is undefined for a zero vector")
    dot = np.sum(e * e_hat, axis=1)
    cos = dot / (ne * nh)
    ced = 1.0 - cos
    out = LossBreakdown(float(mse.mean()), float(dist.mean()), float(ced.mean()), 0.0)
    out.total = l1 * out.mse + l2 * out.pd + l3 * out.ced
    if not with_grad:
        return out
    g = l1 * 2.0 * diff / n
    safe = np.where(dist > 0, dist, 1.0)
    g += l2 * np.where(dist[:, None] > 0, diff / safe[:, None], 0.0)
    g -= l3 * (e / (ne * nh)[:, None] - (dot / (ne * nh ** 3))[:, None] * e_hat)
    return out, g / b


# ----------------------------------------------------------------------------
# models
# ----------------------------------------------------------------------------

class FemModel:
    """Embedding-to-embedding mapper, MLP or KAN variant.

    Inputs are multiplied by ``input_scale`` before the first layer.  Training
    sets it to 1 / RMS of the training inputs, so unit-norm 512-d embeddings
    (entries ~0.04) land on the [-1, 1] spline grid instead of one knot span.
    """

    def __init__(self, variant: str, widths: Sequence[int], net: Sequential,
                 grid: Optional[SplineGrid] = None, input_scale: float = 1.0,
                 provenance: Optional[dict] = None):
        self.variant = variant
        self.widths = tuple(int(w) for w in widths)
        self.net = net
        self.grid = grid
        self.input_scale = float(input_scale)
        # free-form description of the training data (e.g. its protection scheme)
        self.provenance = provenance

    @property
    def embedding_dim(self) -> int:
        return self.widths[0]

    def params(self) -> Dict[str, np.ndarray]:
        return self.net.params()

    def grads(self) -> Dict[str, np.ndarray]:
        return self.net.grads()

    def zero_grad(self) -> None:
        self.net.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self.net.train(train)
        if self.input_scale != 1.0:
            x = x * x.dtype.type(self.input_scale)
        return self.net.forward(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        g = self.net.backward(grad_out)
        return g * g.dtype.type(self.input_scale) if self.input_scale != 1.0 else g

    def state_arrays(self) -> List[Tuple[str, np.ndarray]]:
        """All stored arrays (parameters and batchnorm buffers) in serialisation order."""
        out = []
        for i, layer in enumerate(self.net.layers):
            for k, v in layer.params().items():
                out.append((f"{i}.{k}", v))
            if isinstance(layer, BatchNorm1d):
                for k, v in layer.buffers().items():
                    out.append((f"{i}.{k}", v))
        return out

    def astype(self, dtype) -> "FemModel":
        return FemModel(self.variant, self.widths, self.net.astype(dtype), self.grid,
                        self.input_scale, self.provenance)

    def __repr__(self):
        return f"FemModel({self.variant}, widths={list(self.widths)}, params={self.parameter_count()})"


def fem_build(variant: str = "kan", widths: Sequence[int] = PAPER_WIDTHS, seed: int = 0,
              grid: SplineGrid = SplineGrid(), dtype=DEFAULT_DTYPE) -> FemModel:
    """Build an MLP (Linear-BN-GELU blocks, plain final Linear) or KAN mapper."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) <= 0:
        raise ValueError(f"invalid widths {widths}")
    if widths[0] != widths[-1]:
        raise ValueError("input and output width must both equal the embedding dimension")
    variant = variant.lower()
    if variant == "mlp":
        rng = np.random.default_rng(seed)
        layers = []
        for a, b in zip(widths[:-2], widths[1:-1]):
            layers += [Linear(a, b, rng, dtype), BatchNorm1d(b, dtype=dtype), GELU()]
        layers.append(Linear(widths[-2], widths[-1], rng, dtype))
        return FemModel("mlp", widths, Sequential(layers))
    if variant == "kan":
        return FemModel("kan", widths, Sequential(kan_init(widths, grid, seed, dtype)), grid)
    raise ValueError(f"unknown FEM variant {variant!r}")


def map_embedding(model: FemModel, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode forward pass on a single embedding or a batch."""
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.embedding_dim:
        raise ShapeError(f"expected embeddings of dim {model.embedding_dim}, got shape {x.shape}")
    dtype = next(iter(model.params().values())).dtype
    xb = xb.astype(dtype, copy=False)
    outs = [model.forward(xb[i:i + batch_size], train=False)
            for i in range(0, len(xb), batch_size)]
    out = np.concatenate(outs) if outs else np.zeros((0, model.embedding_dim), dtype)
    return out[0] if single else out


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lambdas: Tuple[float, float, float] = PAPER_LAMBDAS
    optimizer: Optional[str] = None          # None -> SGD for KAN, AdamW for MLP
    lr: Optional[float] = None               # None -> 1e-2 (SGD) / 1e-3 (AdamW)
    lr_decay: Optional[float] = None         # None -> 1.0 (SGD) / 0.8 (AdamW)
    weight_decay: Optional[float] = None     # None -> 0 (SGD) / 1e-2 (AdamW)
    momentum: float = 0.0
    spline_l1: float = 0.0
    fit_input_scale: bool = True
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 3 or min(self.lambdas) < 0:
            raise ValueError(f"lambdas must be three nonnegative values, got {self.lambdas}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def resolved(self, variant: str) -> "TrainConfig":
        """Copy with variant-dependent defaults filled in."""
        opt = (self.optimizer or ("sgd" if variant == "kan" else "adamw")).lower()
        sgd = opt == "sgd"
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lambdas=self.lambdas,
            optimizer=opt,
            lr=self.lr if self.lr is not None else (1e-2 if sgd else 1e-3),
            lr_decay=self.lr_decay if self.lr_decay is not None else (1.0 if sgd else 0.8),
            weight_decay=(self.weight_decay if self.weight_decay is not None
                          else (0.0 if sgd else 1e-2)),
            momentum=self.momentum, spline_l1=self.spline_l1,
            fit_input_scale=self.fit_input_scale, seed=self.seed, shuffle=self.shuffle)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_decay)
    if cfg.optimizer == "adamw":
        return AdamW(cfg.lr, weight_decay=cfg.weight_decay, lr_decay_gamma=cfg.lr_decay)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def _batches(order: np.ndarray, batch_size: int, min_size: int) -> List[np.ndarray]:
    out = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # a trailing batch too small for batchnorm is folded into its predecessor
    if len(out) > 1 and len(out[-1]) < min_size:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _spline_l1(model: FemModel, coef: float) -> float:
    if not coef:
        return 0.0
    total = 0.0
    for layer in model.net.layers:
        if isinstance(layer, KanLayer):
            w = layer.spline_weight
            total += coef * float(np.abs(w).mean(dtype=np.float64))
            layer.grad_spline_weight += (coef * np.sign(w) / w.size).astype(w.dtype)
    return total


def fit_input_scale(x: np.ndarray) -> float:
    rms = float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))
    return 1.0 / rms if rms > 0 else 1.0


@dataclass
class TrainResult:
    model: FemModel
    history: List[LossBreakdown] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)


def train(model: FemModel, source: np.ndarray, target: np.ndarray,
          cfg: TrainConfig = TrainConfig(), rng: Optional[np.random.Generator] = None,
          callback=None) -> TrainResult:
    """Mini-batch training of ``model`` to map ``source`` rows onto ``target`` rows.

    ``history`` holds one sample-weighted mean LossBreakdown per epoch.
    Raises DivergedError on a non-finite loss or gradient.
    """
    source = np.asarray(source)
    target = np.asarray(target)
    if source.shape != target.shape:
        raise ShapeError(f"source {source.shape} and target {target.shape} differ")
    if source.ndim != 2 or source.shape[1] != model.embedding_dim:
        raise ShapeError(f"expected (n, {model.embedding_dim}) pairs, got {source.shape}")
    cfg = cfg.resolved(model.variant)
    result = TrainResult(model)
    if cfg.epochs == 0:
        return result
    if len(source) < 2:
        raise ValueError("training needs at least two pairs")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if cfg.fit_input_scale:
        model.input_scale = fit_input_scale(source)
    opt = make_optimizer(cfg)
    dtype = next(iter(model.params().values())).dtype
    params = model.params()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(source)) if cfg.shuffle else np.arange(len(source))
        sums = np.zeros(4)
        for idx in _batches(order, cfg.batch_size, 2):
            x = source[idx].astype(dtype, copy=False)
            y = target[idx]
            model.zero_grad()
            out = model.forward(x, train=True)
            if not np.all(np.isfinite(out)):
                raise DivergedError(f"non-finite model output at epoch {epoch}")
            loss, g = joint_loss(y, out, cfg.lambdas, with_grad=True)
            if not math.isfinite(loss.total):
                raise DivergedError(f"non-finite loss at epoch {epoch}")
            model.backward(g.astype(dtype))
            _spline_l1(model, cfg.spline_l1)
            opt.step(params, model.grads())
            sums += len(idx) * np.array([loss.mse, loss.pd, loss.ced, loss.total])
        sums /= len(source)
        bd = LossBreakdown(*map(float, sums))
        result.history.append(bd)
        result.lr_history.append(opt.lr)
        log.info("epoch %d/%d total=%.4f mse=%.5f pd=%.4f ced=%.4f lr=%.3g", epoch + 1,
                 cfg.epochs, bd.total, bd.mse, bd.pd, bd.ced, opt.lr)
        if callback is not None:
            callback(epoch, bd)
        opt.epoch_end()
    model.net.train(False)
    return result


def evaluate_loss(model: FemModel, source: np.ndarray, target: np.ndarray,
                  lambdas: Sequence[float] = PAPER_LAMBDAS) -> LossBreakdown:
    return joint_loss(target, map_embedding(model, source), lambdas)
