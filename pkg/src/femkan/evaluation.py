"""Embedding-space verification metrics: cosine scores, FAR-calibrated
thresholds, attack success rate, similarity histograms and MMD."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

REPORT_VERSION = 1
HIST_BINS = 50


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroDivisionError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_rows(A, B) -> np.ndarray:
    """Row-wise cosine similarity of two equally shaped batches."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"batch shapes differ: {A.shape} vs {B.shape}")
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ZeroDivisionError("cosine similarity is undefined for a zero vector")
    return np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)


# ----------------------------------------------------------------------------
# thresholds
# ----------------------------------------------------------------------------

@dataclass
class VerificationThreshold:
    value: float
    far_target: float
    achieved_far: float
    calibration_size: int


def calibrate_threshold(impostor_scores, far: float = 0.01) -> VerificationThreshold:
    """Smallest observed score ``t`` with fraction(scores > t) <= far."""
    s = np.sort(np.asarray(impostor_scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("cannot calibrate a threshold without impostor scores")
    if not 0.0 < far < 1.0:
        raise ValueError(f"far must lie in (0, 1), got {far}")
    n = s.size
    above = n - np.searchsorted(s, s, side="right")
    ok = above <= far * n + 1e-9
    i = int(np.argmax(ok))          # sorted, so the first hit is the smallest t
    return VerificationThreshold(float(s[i]), far, float(above[i] / n), n)


def sample_impostor_pairs(labels, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` uniformly drawn index pairs (i, j) with different labels."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("impostor pairs need at least two identities")
    out = np.zeros((0, 2), dtype=np.int64)
    while len(out) < count:
        need = count - len(out)
        cand = rng.integers(0, len(labels), size=(2 * need + 16, 2))
        cand = cand[labels[cand[:, 0]] != labels[cand[:, 1]]]
        out = np.concatenate([out, cand[:need]])
    return out


def impostor_scores(embeddings, labels, count: int = 100_000,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = sample_impostor_pairs(labels, count, rng)
    E = np.asarray(embeddings, dtype=np.float64)
    return cosine_rows(E[pairs[:, 0]], E[pairs[:, 1]])


# ----------------------------------------------------------------------------
# MMD
# ----------------------------------------------------------------------------

def _sq_dists(X, Y):
    d = (np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :] - 2.0 * X @ Y.T)
    return np.maximum(d, 0.0)


def median_bandwidth(X, Y) -> float:
    Z = np.concatenate([X, Y])
    d = np.sqrt(_sq_dists(Z, Z)[np.triu_indices(len(Z), k=1)])
    h = float(np.median(d))
    return h if h > 0 else 1.0


def mmd(X, Y, bandwidth: Optional[float] = None, unbiased: bool = False) -> float:
    """Squared MMD with an RBF kernel exp(-d^2 / (2 h^2)).

    Bandwidth defaults to the median pairwise distance over the pooled sample.
    The biased (V-statistic) estimate is exactly zero for identical samples.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X, Y = X[:, None], Y[:, None]
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("MMD needs two nonempty samples")
    if unbiased and (len(X) < 2 or len(Y) < 2):
        raise ValueError("the unbiased MMD needs at least two points per sample")
    h = median_bandwidth(X, Y) if bandwidth is None else float(bandwidth)
    g = 1.0 / (2.0 * h * h)
    kxx = np.exp(-g * _sq_dists(X, X))
    kyy = np.exp(-g * _sq_dists(Y, Y))
    kxy = np.exp(-g * _sq_dists(X, Y))
    if unbiased:
        m, n = len(X), len(Y)
        val = ((kxx.sum() - np.trace(kxx)) / (m * (m - 1))
               + (kyy.sum() - np.trace(kyy)) / (n * (n - 1)) - 2.0 * kxy.mean())
        return float(val)
    return float(max(kxx.mean() + kyy.mean() - 2.0 * kxy.mean(), 0.0))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_probes: int
    mean_cosine: float
    median_cosine: float
    histogram: List[int]
    hist_range: List[float] = field(default_factory=lambda: [-1.0, 1.0])
    asr: Optional[float] = None
    successes: Optional[int] = None
    identity_asr: Optional[float] = None
    threshold: Optional[Dict] = None
    mmd: Optional[float] = None
    scores: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    success: Optional[np.ndarray] = None

    def as_dict(self) -> dict:
        d = asdict(self)
        for k in ("scores", "labels", "success"):
            d.pop(k)
        return d


def similarity_histogram(scores) -> List[int]:
    counts, _ = np.histogram(np.clip(scores, -1.0, 1.0), bins=HIST_BINS, range=(-1.0, 1.0))
    return counts.tolist()


def _check_aligned(mapped, enrolled, labels):
    mapped = np.asarray(mapped)
    enrolled = np.asarray(enrolled)
    labels = np.asarray(labels)
    if mapped.shape != enrolled.shape or len(labels) != len(mapped):
        raise ValueError(f"probe/enrolment/label mismatch: {mapped.shape}, {enrolled.shape}, "
                         f"{labels.shape}")
    return mapped, enrolled, labels


def similarity_report(mapped, enrolled, labels) -> MetricsReport:
    """Genuine-pair cosine distribution: probe i vs the enrolled template of its identity."""
    mapped, enrolled, labels = _check_aligned(mapped, enrolled, labels)
    s = cosine_rows(mapped, enrolled)
    return MetricsReport(len(s), float(s.mean()), float(np.median(s)), similarity_histogram(s),
                         scores=s, labels=labels)


def asr(mapped, enrolled, labels, threshold: VerificationThreshold) -> MetricsReport:
    """Attack success: probe accepted when its cosine to the enrolled template >= threshold.

    ``asr`` counts per probe; ``identity_asr`` counts an identity as broken if
    any of its probes succeeds.
    """
    rep = similarity_report(mapped, enrolled, labels)
    ok = rep.scores >= threshold.value
    rep.success = ok
    rep.successes = int(ok.sum())
    rep.asr = rep.successes / len(ok) if len(ok) else 0.0
    ids = np.unique(rep.labels)
    rep.identity_asr = float(np.mean([ok[rep.labels == i].any() for i in ids])) if len(ids) else 0.0
    rep.threshold = asdict(threshold)
    return rep


def write_report(report: dict, path) -> None:
    payload = {"report_version": REPORT_VERSION, **report}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def write_scores_csv(rep: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"# femkan scores v{REPORT_VERSION}"])
        w.writerow(["probe", "label", "cosine", "success"])
        succ = rep.success if rep.success is not None else [""] * rep.n_probes
        for i, (lab, s, ok) in enumerate(zip(rep.labels, rep.scores, succ)):
            w.writerow([i, int(lab), f"{s:.8f}", "" if ok == "" else int(ok)])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
