"""Shared setup for the experiment scripts: dataset, split, training, scoring."""
import argparse
import json
import time

import numpy as np

from femkan.evaluation import asr, calibrate_threshold, cosine_rows, impostor_scores
from femkan.fem import TrainConfig, fem_build, map_embedding, train
from femkan.seeding import substream
from femkan.synth import make_dataset, split_by_identity, substream_seed


def base_parser(doc):
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--ids", type=int, default=200)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--models", default="mlp,kan", help="comma-separated subset of mlp,kan")
    p.add_argument("--out", help="optional JSON file for the results")
    return p


def dataset(args):
    ds = make_dataset(args.ids, args.samples, 0.05, args.seed)
    tr, te = split_by_identity(ds, 0.2, seed=substream_seed(args.seed, "split"))
    return ds, tr, te


def fit(variant, tr, args, **cfg):
    m = fem_build(variant, seed=substream_seed(args.seed, f"init_{variant}"))
    t0 = time.perf_counter()
    with np.errstate(over="ignore"):
        train(m, tr.source, tr.target,
              TrainConfig(epochs=args.epochs, seed=substream_seed(args.seed, "train"), **cfg))
    return m, time.perf_counter() - t0


def threshold(ds, seed, far=0.01):
    return calibrate_threshold(impostor_scores(ds.target, ds.labels, 100_000,
                                               substream(seed, "calibration")), far)


def score(model, probes, te, thr):
    mapped = map_embedding(model, probes)
    rep = asr(mapped, te.target, te.labels, thr)
    return {"mean_cosine": rep.mean_cosine, "asr": rep.asr}


def mean_cos(a, b):
    return float(cosine_rows(a, b).mean())


def dump(results, path):
    if path:
        with open(path, "w") as fh:
            json.dump(results, fh, indent=2)
