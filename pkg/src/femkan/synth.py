"""Synthetic paired encoders standing in for two face-recognition models.

An "identity" is a latent vector; a "photo" of it is the latent plus small
Gaussian noise.  Two frozen random encoders map the same photo into two
different 512-d unit-norm embedding spaces, giving (source, target) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seeding import substream


@dataclass(frozen=True)
class EncoderSpec:
    seed: int
    w1: np.ndarray          # (out_dim, latent_dim)
    w2: np.ndarray          # (out_dim, out_dim)

    @property
    def latent_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != encoder latent dim {self.latent_dim}")
        h = np.tanh(z @ self.w1.T) @ self.w2.T
        return h / np.linalg.norm(h, axis=-1, keepdims=True)


def encoder_new(seed: int, latent_dim: int = 64, out_dim: int = 512) -> EncoderSpec:
    if latent_dim <= 0 or out_dim <= 0:
        raise ValueError("encoder dimensions must be positive")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((out_dim, latent_dim)) / np.sqrt(latent_dim)
    w2 = rng.standard_normal((out_dim, out_dim)) / np.sqrt(out_dim)
    w1.setflags(write=False)
    w2.setflags(write=False)
    enc = EncoderSpec(seed, w1, w2)
    # linearised encoder must be injective on the latent space
    j = w2 @ w1
    if np.linalg.svd(j.T @ j, compute_uv=False).min() <= 1e-3:
        raise ValueError(f"encoder seed {seed} produced a rank-deficient map")
    return enc


@dataclass
class PairedDataset:
    labels: np.ndarray      # (n,) uint32
    source: np.ndarray      # (n, dim) float32, embeddings from the attacked model
    target: np.ndarray      # (n, dim) float32, embeddings in the generator's space
    meta: Optional[dict] = None

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    def subset(self, idx) -> "PairedDataset":
        return PairedDataset(self.labels[idx], self.source[idx], self.target[idx],
                             dict(self.meta) if self.meta else None)

    def __eq__(self, other):
        if not isinstance(other, PairedDataset):
            return NotImplemented
        return (np.array_equal(self.labels, other.labels)
                and self.source.tobytes() == other.source.tobytes()
                and self.target.tobytes() == other.target.tobytes()
                and self.source.shape == other.source.shape
                and (self.meta or {}) == (other.meta or {}))


def build_paired_dataset(enc_target: EncoderSpec, enc_source: EncoderSpec, n_ids: int,
                         samples_per_id: int = 5, sigma: float = 0.05, seed: int = 0,
                         first_label: int = 0) -> PairedDataset:
    """Sample ``n_ids`` identities, ``samples_per_id`` noisy photos each.

    Identity latents are N(0, I/latent_dim) (unit expected norm), photos add
    N(0, sigma^2 I).  Each identity draws from its own sub-stream, so results
    do not depend on generation order.
    """
    if enc_target.latent_dim != enc_source.latent_dim:
        raise ValueError("encoders disagree on latent dimension")
    if enc_target.out_dim != enc_source.out_dim:
        raise ValueError("encoders disagree on embedding dimension")
    d = enc_target.latent_dim
    zs = np.zeros((n_ids * samples_per_id, d))
    for i in range(n_ids):
        rng = np.random.default_rng([seed, i])
        base = rng.standard_normal(d) / np.sqrt(d)
        noise = rng.standard_normal((samples_per_id, d))
        zs[i * samples_per_id:(i + 1) * samples_per_id] = base + sigma * noise
    labels = np.repeat(np.arange(first_label, first_label + n_ids, dtype=np.uint32), samples_per_id)
    return PairedDataset(labels,
                         enc_source(zs).astype(np.float32),
                         enc_target(zs).astype(np.float32))


def make_dataset(n_ids: int = 200, samples_per_id: int = 5, sigma: float = 0.05, seed: int = 42,
                 encoder_seed: Optional[int] = None, latent_dim: int = 64,
                 dim: int = 512, first_label: int = 0) -> PairedDataset:
    """Encoders and identities derived from named sub-streams of one seed."""
    es = seed if encoder_seed is None else encoder_seed
    enc_t = encoder_new(substream_seed(es, "encoder_target"), latent_dim, dim)
    enc_s = encoder_new(substream_seed(es, "encoder_source"), latent_dim, dim)
    ds = build_paired_dataset(enc_t, enc_s, n_ids, samples_per_id, sigma,
                              substream_seed(seed, "identities"), first_label)
    ds.meta = {"generator": "synth", "seed": seed, "encoder_seed": es, "ids": n_ids,
               "samples_per_id": samples_per_id, "sigma": sigma, "latent_dim": latent_dim,
               "first_label": first_label}
    return ds


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2 ** 63 - 1))


def split_by_identity(ds: PairedDataset, test_fraction: float = 0.2, seed: int = 0):
    """Disjoint-identity train/test split."""
    ids = np.unique(ds.labels)
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(test_fraction * len(ids))))
    test_ids = rng.choice(ids, size=n_test, replace=False)
    mask = np.isin(ds.labels, test_ids)
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))
