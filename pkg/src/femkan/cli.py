"""Command-line experiment driver: synth, train, map, protect, leak, eval.

Every option can also come from an INI file (``--config``): keys in the
``[common]`` section apply to all subcommands, keys in a section named after
the subcommand apply to it alone.  Command-line flags override the file.
All randomness derives from ``--seed`` through named sub-streams.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from . import formats
from .evaluation import (REPORT_VERSION, asr, calibrate_threshold, cosine_rows, impostor_scores,
                         mmd, write_report, write_scores_csv)
from .fem import LOSS_PRESETS, PAPER_WIDTHS, TrainConfig, fem_build, map_embedding, train
from .kan import SplineGrid
from .leakage import LeakageSpec, leak
from .nncore import DivergedError
from .protection import MlpHashParams, protect_batch
from .seeding import substream
from .synth import PairedDataset, make_dataset, substream_seed

log = logging.getLogger("femkan")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_DIVERGED = 5

FORMAT_VERSIONS = {"EMBD": formats.FORMAT_VERSION, "EMBP": formats.FORMAT_VERSION,
                   "FEMW": formats.FORMAT_VERSION, "report": REPORT_VERSION}
MMD_MAX_SAMPLES = 2000


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# option tables
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: Any = None
    help: str = ""
    choices: Optional[tuple] = None
    required: bool = False

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


def _int_list(s) -> List[int]:
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).replace(",", " ").split()]


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


COMMON = [
    Opt("seed", int, 0, "experiment seed"),
    Opt("report", str, None, "JSON report path"),
]

COMMANDS: Dict[str, List[Opt]] = {
    "synth": [
        Opt("out", str, None, "output EMBP file", required=True),
        Opt("ids", int, 200, "number of identities"),
        Opt("samples", int, 5, "samples per identity"),
        Opt("sigma", float, 0.05, "latent noise per sample"),
        Opt("encoder-seed", int, None, "encoder seed (defaults to --seed)"),
        Opt("latent-dim", int, 64, "identity latent dimension"),
        Opt("dim", int, 512, "embedding dimension"),
        Opt("first-label", int, 0, "label of the first identity"),
    ],
    "train": [
        Opt("data", str, None, "training pairs (EMBP)", required=True),
        Opt("out", str, None, "output FEMW file", required=True),
        Opt("model", str, "kan", "mapper variant", ("kan", "mlp")),
        Opt("widths", _int_list, list(PAPER_WIDTHS), "layer widths, e.g. 512,1024,3072,512"),
        Opt("epochs", int, 20, "training epochs"),
        Opt("batch-size", int, 128, "mini-batch size"),
        Opt("loss", str, "full", "loss weight preset", tuple(LOSS_PRESETS)),
        Opt("optimizer", str, None, "sgd or adamw (default depends on --model)", ("sgd", "adamw")),
        Opt("lr", float, None, "learning rate"),
        Opt("lr-decay", float, None, "per-epoch exponential lr decay"),
        Opt("weight-decay", float, None, "weight decay"),
        Opt("momentum", float, 0.0, "SGD momentum"),
        Opt("spline-l1", float, 0.0, "L1 penalty on spline coefficients"),
        Opt("grid-size", int, 5, "KAN grid intervals"),
        Opt("spline-order", int, 3, "KAN spline order"),
        Opt("fit-input-scale", _bool, True, "rescale inputs to unit RMS"),
        Opt("history", str, None, "per-epoch loss CSV (default: <out>.history.csv)"),
    ],
    "map": [
        Opt("model", str, None, "trained FEMW file", required=True),
        Opt("data", str, None, "EMBP (source block is mapped) or EMBD", required=True),
        Opt("out", str, None, "output EMBD file", required=True),
    ],
    "protect": [
        Opt("data", str, None, "EMBP (source block is protected) or EMBD", required=True),
        Opt("out", str, None, "output file, same kind as the input", required=True),
        Opt("scheme", str, "polyprotect", "protection scheme", ("polyprotect", "mlphash")),
        Opt("layers", _int_list, [512], "MLP-Hash hidden widths"),
        Opt("tau", float, 0.0, "MLP-Hash binarisation threshold"),
    ],
    "leak": [
        Opt("data", str, None, "EMBP (source block is leaked) or EMBD", required=True),
        Opt("out", str, None, "output file, same kind as the input", required=True),
        Opt("fraction", float, 0.9, "leaked prefix fraction"),
        Opt("rounding", str, "half_up", "kept-count rounding", ("half_up", "floor")),
    ],
    "eval": [
        Opt("data", str, None, "EMBP pairs; targets are the enrolled templates", required=True),
        Opt("mapped", str, None, "mapped probes (EMBD); default: unmapped sources"),
        Opt("far", float, 0.01, "target false acceptance rate"),
        Opt("impostors", int, 100_000, "impostor pairs for calibration"),
        Opt("scores", str, None, "per-probe score CSV"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="femkan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        sp.add_argument("--config", help="INI file with [common] / [%s] sections" % cmd)
        for o in COMMON + opts:
            kind = str if o.type is _int_list else o.type
            sp.add_argument(f"--{o.name}", dest=o.dest, type=kind, default=None,
                            choices=o.choices, help=o.help)
    return p


def resolve_config(cmd: str, args: argparse.Namespace) -> Dict[str, Any]:
    """Defaults, then the INI file, then command-line flags."""
    opts = {o.dest: o for o in COMMON + COMMANDS[cmd]}
    cfg = {k: o.default for k, o in opts.items()}
    if getattr(args, "config", None):
        ini = configparser.ConfigParser()
        try:
            with open(args.config) as fh:
                ini.read_file(fh)
        except configparser.Error as e:
            raise UsageError(f"{args.config}: {e}") from e
        for section in ("common", cmd):
            if not ini.has_section(section):
                continue
            for key, raw in ini.items(section):
                dest = key.replace("-", "_")
                if dest not in opts:
                    if section == cmd:
                        raise UsageError(f"{args.config}: unknown option {key!r} in [{cmd}]")
                    continue
                try:
                    cfg[dest] = opts[dest].type(raw)
                except ValueError as e:
                    raise UsageError(f"{args.config}: bad value for {key}: {e}") from e
    for dest, o in opts.items():
        v = getattr(args, dest, None)
        if v is not None:
            cfg[dest] = o.type(v)
    for dest, o in opts.items():
        if o.required and cfg[dest] is None:
            raise UsageError(f"{cmd}: --{o.name} is required")
        if o.choices and cfg[dest] is not None and cfg[dest] not in o.choices:
            raise UsageError(f"{cmd}: --{o.name} must be one of {', '.join(o.choices)}")
    return cfg


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _report(cfg, command: str, results: dict, warnings: Optional[List[str]] = None) -> dict:
    rep = {"command": command, "config": cfg, "formats": FORMAT_VERSIONS, "results": results,
           "warnings": warnings or []}
    if cfg.get("report"):
        write_report(rep, cfg["report"])
    return rep


def _load_any(path):
    """Returns (kind, labels, blocks, meta) for an EMBD or EMBP file."""
    magic = formats.sniff(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if magic == b"EMBP":
        labels, blocks, meta = formats.decode_embeddings(data, paired=True)
        return "EMBP", labels, blocks, meta
    labels, blocks, meta = formats.decode_embeddings(data)
    return "EMBD", labels, blocks, meta


def _save_like(kind, path, labels, first_block, rest, meta) -> None:
    payload = formats.encode_embeddings(labels, [first_block] + list(rest), meta,
                                        paired=kind == "EMBP")
    formats._write_atomic(path, payload)


def _protection_of(meta) -> Optional[dict]:
    if not meta:
        return None
    prot = meta.get("protection")
    if prot is None:
        return None
    # per-identity PolyProtect parameters are bulky and irrelevant to provenance checks
    return {k: v for k, v in prot.items() if k != "params"} | (
        {"params": prot["params"]} if prot.get("scheme") == "mlphash" else {})


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_synth(cfg) -> dict:
    ds = make_dataset(cfg["ids"], cfg["samples"], cfg["sigma"], cfg["seed"], cfg["encoder_seed"],
                      cfg["latent_dim"], cfg["dim"], cfg["first_label"])
    formats.save_dataset(cfg["out"], ds)
    stats = {"count": len(ds), "identities": cfg["ids"], "dim": ds.dim}
    if len(ds) and cfg["ids"] >= 2:
        rng = substream(cfg["seed"], "synth_summary")
        same = ds.labels[:-1] == ds.labels[1:]
        gen = cosine_rows(ds.target[:-1][same], ds.target[1:][same]) if same.any() else np.zeros(1)
        imp = impostor_scores(ds.target, ds.labels, 10_000, rng)
        base = cosine_rows(ds.source, ds.target)
        stats.update(genuine_cosine=float(gen.mean()), impostor_cosine=float(imp.mean()),
                     unmapped_cross_cosine=float(base.mean()))
    log.info("wrote %d pairs to %s %s", len(ds), cfg["out"], json.dumps(stats, sort_keys=True))
    return _report(cfg, "synth", stats)


def train_config_from(cfg) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       lambdas=LOSS_PRESETS[cfg["loss"]], optimizer=cfg["optimizer"],
                       lr=cfg["lr"], lr_decay=cfg["lr_decay"], weight_decay=cfg["weight_decay"],
                       momentum=cfg["momentum"], spline_l1=cfg["spline_l1"],
                       fit_input_scale=cfg["fit_input_scale"],
                       seed=substream_seed(cfg["seed"], "train"))


def cmd_train(cfg) -> dict:
    ds = formats.load_dataset(cfg["data"])
    widths = list(cfg["widths"])
    if widths[0] != ds.dim:
        raise UsageError(f"model input width {widths[0]} does not match data dim {ds.dim}")
    grid = SplineGrid(cfg["grid_size"], cfg["spline_order"])
    model = fem_build(cfg["model"], widths, seed=substream_seed(cfg["seed"], "init"), grid=grid)
    tcfg = train_config_from(cfg)
    with np.errstate(over="ignore", invalid="ignore"):     # divergence is reported, not warned
        result = train(model, ds.source, ds.target, tcfg, rng=substream(cfg["seed"], "shuffle"))
    model.provenance = {"data": cfg["data"], "protection": _protection_of(ds.meta),
                        "leak": (ds.meta or {}).get("leak")}
    formats.save_model(cfg["out"], model)
    hist_path = cfg["history"] or cfg["out"] + ".history.csv"
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mse", "pd", "ced", "total", "lr"])
        for i, (h, lr) in enumerate(zip(result.history, result.lr_history), 1):
            w.writerow([i, repr(h.mse), repr(h.pd), repr(h.ced), repr(h.total), repr(lr)])
    resolved = dict(cfg, history=hist_path, train=vars(tcfg.resolved(model.variant)))
    return _report(resolved, "train", {
        "epochs_run": len(result.history), "parameters": model.parameter_count(),
        "input_scale": model.input_scale,
        "final_loss": result.history[-1].as_dict() if result.history else None})


def cmd_map(cfg) -> dict:
    model = formats.load_model(cfg["model"])
    kind, labels, blocks, meta = _load_any(cfg["data"])
    src = blocks[0]
    if src.shape[1] != model.embedding_dim:
        raise UsageError(f"data dim {src.shape[1]} does not match model dim {model.embedding_dim}")
    warnings = _provenance_warnings(model.provenance, meta)
    out = map_embedding(model, src) if len(src) else np.zeros_like(src)
    out_meta = {"mapped_by": {"variant": model.variant, "provenance": model.provenance},
                "input": meta, "warnings": warnings}
    formats.save_embeddings(cfg["out"], labels, out, out_meta)
    return _report(cfg, "map", {"count": len(labels)}, warnings)


def _provenance_warnings(provenance, data_meta) -> List[str]:
    trained = (provenance or {}).get("protection")
    given = _protection_of(data_meta)
    if trained == given:
        return []
    msg = (f"model was trained on protection {json.dumps(trained, sort_keys=True)} but input "
           f"carries {json.dumps(given, sort_keys=True)}")
    log.warning(msg)
    return [msg]


def cmd_protect(cfg) -> dict:
    kind, labels, blocks, meta = _load_any(cfg["data"])
    if (meta or {}).get("protection"):
        raise UsageError(f"{cfg['data']} is already protected")
    seed = substream_seed(cfg["seed"], "protect")
    mh = MlpHashParams(seed, cfg["layers"], cfg["tau"]) if cfg["scheme"] == "mlphash" else None
    dim = blocks[0].shape[1]
    prot, info = protect_batch(blocks[0], labels, cfg["scheme"], seed, dim, mh)
    if info["protected_dim"] < dim:
        log.info("protected %d -> %d dims, padded with %d zeros to %d", dim,
                 info["protected_dim"], dim - info["protected_dim"], dim)
    elif info["protected_dim"] > dim:
        raise UsageError(f"protected length {info['protected_dim']} exceeds embedding dim {dim}")
    new_meta = dict(meta or {}, protection=info)
    _save_like(kind, cfg["out"], labels, prot, blocks[1:], new_meta)
    return _report(cfg, "protect", {"count": len(labels), "protected_dim": info["protected_dim"],
                                    "padded_dim": dim})


def cmd_leak(cfg) -> dict:
    kind, labels, blocks, meta = _load_any(cfg["data"])
    spec = LeakageSpec(cfg["fraction"], blocks[0].shape[1], cfg["rounding"])
    out = leak(blocks[0], spec)
    new_meta = dict(meta or {}, leak={"fraction": spec.fraction, "kept": spec.kept,
                                      "total_dim": spec.total_dim, "rounding": spec.rounding})
    _save_like(kind, cfg["out"], labels, out, blocks[1:], new_meta)
    return _report(cfg, "leak", {"count": len(labels), "kept": spec.kept})


def cmd_eval(cfg) -> dict:
    ds = formats.load_dataset(cfg["data"])
    warnings: List[str] = []
    if cfg["mapped"]:
        labels, probes, mmeta = formats.load_embeddings(cfg["mapped"])
        if not np.array_equal(labels, ds.labels):
            raise UsageError("labels of --mapped do not match --data")
        warnings += (mmeta or {}).get("warnings", [])
    else:
        probes = ds.source
    enrolled = ds.target
    rng = substream(cfg["seed"], "calibration")
    imp = impostor_scores(enrolled, ds.labels, cfg["impostors"], rng)
    thr = calibrate_threshold(imp, cfg["far"])
    rep = asr(probes, enrolled, ds.labels, thr)
    n = min(len(probes), MMD_MAX_SAMPLES)
    pick = np.sort(substream(cfg["seed"], "mmd").choice(len(probes), n, replace=False))
    rep.mmd = mmd(probes[pick], enrolled[pick])
    if cfg["scores"]:
        write_scores_csv(rep, cfg["scores"])
    results = rep.as_dict()
    results["probes"] = "mapped" if cfg["mapped"] else "unmapped"
    log.info("mean cosine %.4f  threshold %.4f  ASR %.4f", rep.mean_cosine, thr.value, rep.asr)
    return _report(cfg, "eval", results, warnings)


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "map": cmd_map, "protect": cmd_protect,
            "leak": cmd_leak, "eval": cmd_eval}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        rep = HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"femkan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except formats.FormatError as e:
        print(f"femkan {args.command}: format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        where = f" ({e.filename})" if getattr(e, "filename", None) else ""
        print(f"femkan {args.command}: I/O error{where}: {e.strerror or e}", file=sys.stderr)
        return EXIT_IO
    except DivergedError as e:
        print(f"femkan {args.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"femkan {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(rep["results"], sort_keys=True, default=_short))
    return EXIT_OK


def _short(o):
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


if __name__ == "__main__":
    sys.exit(main())
