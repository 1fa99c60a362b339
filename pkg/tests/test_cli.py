import json
import os

import numpy as np
import pytest

from femkan import formats
from femkan.cli import EXIT_DIVERGED, EXIT_FORMAT, EXIT_IO, EXIT_OK, EXIT_USAGE, main

SMALL = ["--dim", "32", "--latent-dim", "8"]
WIDTHS = ["--widths", "32,48,32"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def pipeline(seed=0):
    """A full small run: synth, held-out synth, train, protect, leak, map, eval."""
    assert run("synth", "--ids", 60, "--samples", 5, "--seed", 42, *SMALL, "--out", "tr.embp",
               "--report", "synth.json") == EXIT_OK
    assert run("synth", "--ids", 20, "--samples", 5, "--seed", 43, "--encoder-seed", 42,
               "--first-label", 1000, *SMALL, "--out", "te.embp") == EXIT_OK
    assert run("train", "--data", "tr.embp", "--model", "kan", *WIDTHS, "--epochs", 3,
               "--seed", seed, "--out", "m.femw", "--report", "train.json") == EXIT_OK
    assert run("protect", "--data", "te.embp", "--scheme", "mlphash", "--layers", 32,
               "--seed", seed, "--out", "pte.embp", "--report", "protect.json") == EXIT_OK
    assert run("leak", "--data", "te.embp", "--fraction", 0.5, "--out", "lte.embp",
               "--report", "leak.json") == EXIT_OK
    assert run("map", "--model", "m.femw", "--data", "te.embp", "--out", "mapped.embd",
               "--report", "map.json") == EXIT_OK
    assert run("eval", "--data", "te.embp", "--mapped", "mapped.embd", "--impostors", 20000,
               "--seed", seed, "--report", "eval.json", "--scores", "scores.csv") == EXIT_OK


def test_synth_count(workdir):
    assert run("synth", "--ids", 200, "--samples", 5, "--seed", 42, "--out", "pairs.embp") == 0
    assert len(formats.load_dataset("pairs.embp")) == 1000


def test_missing_out_is_usage_error(workdir, capsys):
    assert run("synth", "--ids", 3) == EXIT_USAGE
    assert "--out" in capsys.readouterr().err


def test_unknown_flag_and_choice(workdir):
    assert run("synth", "--bogus", 1) == EXIT_USAGE
    assert run("train", "--data", "x", "--out", "y", "--model", "rnn") == EXIT_USAGE


def test_every_command_byte_reproducible(tmp_path, monkeypatch):
    digests = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        pipeline()
        digests.append({f: (d / f).read_bytes() for f in sorted(os.listdir(d))})
    assert digests[0].keys() == digests[1].keys()
    for f in digests[0]:
        assert digests[0][f] == digests[1][f], f


def test_reports_embed_config_and_versions(workdir):
    pipeline()
    for name in ("synth", "train", "protect", "leak", "map", "eval"):
        rep = json.loads(open(f"{name}.json").read())
        assert rep["report_version"] == 1 and rep["command"] == name
        assert rep["formats"]["FEMW"] == formats.FORMAT_VERSION
        assert "seed" in rep["config"]
    train_rep = json.loads(open("train.json").read())
    # defaults are expanded in the resolved config
    assert train_rep["config"]["train"]["optimizer"] == "sgd"
    assert train_rep["config"]["train"]["lr"] == 1e-2
    assert train_rep["config"]["batch_size"] == 128
    ev = json.loads(open("eval.json").read())["results"]
    assert sum(ev["histogram"]) == ev["n_probes"] == 100
    assert ev["asr"] == ev["successes"] / ev["n_probes"]
    assert open("scores.csv").read().count("\n") == 102


def test_train_history_and_defaults(workdir):
    run("synth", "--ids", 30, "--samples", 4, *SMALL, "--out", "p.embp")
    assert run("train", "--data", "p.embp", "--model", "mlp", *WIDTHS, "--out", "m.femw") == 0
    rows = open("m.femw.history.csv").read().splitlines()
    assert rows[0] == "epoch,mse,pd,ced,total,lr" and len(rows) == 21
    assert float(rows[2].split(",")[-1]) == pytest.approx(8e-4)


def test_zero_epochs_is_init(workdir):
    run("synth", "--ids", 10, "--samples", 3, *SMALL, "--out", "p.embp")
    assert run("train", "--data", "p.embp", "--model", "kan", *WIDTHS, "--epochs", 0,
               "--seed", 5, "--out", "m.femw") == 0
    assert open("m.femw.history.csv").read().splitlines() == ["epoch,mse,pd,ced,total,lr"]
    from femkan.fem import fem_build
    from femkan.synth import substream_seed
    init = fem_build("kan", (32, 48, 32), seed=substream_seed(5, "init"))
    loaded = formats.load_model("m.femw")
    assert all(a.tobytes() == b.tobytes()
               for (_, a), (_, b) in zip(init.state_arrays(), loaded.state_arrays()))


@pytest.mark.parametrize("preset", ["pd", "pd+ced", "full"])
def test_loss_presets(workdir, preset):
    run("synth", "--ids", 10, "--samples", 3, *SMALL, "--out", "p.embp")
    assert run("train", "--data", "p.embp", "--model", "mlp", *WIDTHS, "--epochs", 2, "--loss",
               preset, "--out", "m.femw", "--report", "r.json") == 0
    rep = json.loads(open("r.json").read())
    from femkan.fem import LOSS_PRESETS
    assert tuple(rep["config"]["train"]["lambdas"]) == LOSS_PRESETS[preset]


def test_config_file_merged_under_flags(workdir):
    with open("c.ini", "w") as fh:
        fh.write("[common]\nseed = 9\n\n[synth]\nids = 7\nsamples = 2\ndim = 16\n"
                 "latent-dim = 4\n")
    assert run("synth", "--config", "c.ini", "--samples", 3, "--out", "p.embp",
               "--report", "r.json") == 0
    rep = json.loads(open("r.json").read())
    assert rep["config"]["ids"] == 7 and rep["config"]["samples"] == 3
    assert rep["config"]["seed"] == 9
    assert len(formats.load_dataset("p.embp")) == 21


def test_bad_config(workdir):
    with open("c.ini", "w") as fh:
        fh.write("[synth]\nbogus = 1\n")
    assert run("synth", "--config", "c.ini", "--out", "p.embp") == EXIT_USAGE
    assert run("synth", "--config", "missing.ini", "--out", "p.embp") == EXIT_IO


def test_io_and_format_exit_codes(workdir):
    assert run("eval", "--data", "nope.embp") == EXIT_IO
    with open("junk.embp", "wb") as fh:
        fh.write(b"not a dataset at all")
    assert run("eval", "--data", "junk.embp") == EXIT_FORMAT
    run("synth", "--ids", 4, "--samples", 2, *SMALL, "--out", "p.embp")
    data = bytearray(open("p.embp", "rb").read())
    data[-3] ^= 0x40
    open("bad.embp", "wb").write(bytes(data))
    assert run("eval", "--data", "bad.embp") == EXIT_FORMAT


def test_divergence_exit_code(workdir, capsys):
    run("synth", "--ids", 10, "--samples", 3, *SMALL, "--out", "p.embp")
    code = run("train", "--data", "p.embp", "--model", "kan", *WIDTHS, "--lr", 1e12,
               "--epochs", 3, "--out", "m.femw")
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
    assert not os.path.exists("m.femw")


def test_protect_polyprotect_pads(workdir, caplog):
    run("synth", "--ids", 5, "--samples", 2, "--out", "p.embp")
    with caplog.at_level("INFO", logger="femkan"):
        assert run("protect", "--data", "p.embp", "--scheme", "polyprotect", "--out", "q.embp",
                   "--report", "r.json") == 0
    assert "508" in caplog.text and "4 zeros" in caplog.text
    ds = formats.load_dataset("q.embp")
    assert ds.dim == 512 and not ds.source[:, 508:].any()
    assert ds.meta["protection"]["scheme"] == "polyprotect"
    assert len(ds.meta["protection"]["params"]) == 5
    orig = formats.load_dataset("p.embp")
    assert ds.target.tobytes() == orig.target.tobytes()
    assert json.loads(open("r.json").read())["results"]["protected_dim"] == 508
    assert run("protect", "--data", "q.embp", "--out", "r.embp") == EXIT_USAGE


def test_provenance_mismatch_is_warning(workdir):
    run("synth", "--ids", 20, "--samples", 3, *SMALL, "--out", "p.embp")
    run("train", "--data", "p.embp", "--model", "mlp", *WIDTHS, "--epochs", 1, "--out", "m.femw")
    run("protect", "--data", "p.embp", "--scheme", "mlphash", "--layers", 32, "--out", "q.embp")
    assert run("map", "--model", "m.femw", "--data", "q.embp", "--out", "o.embd",
               "--report", "r.json") == EXIT_OK
    assert json.loads(open("r.json").read())["warnings"]
    assert run("eval", "--data", "q.embp", "--mapped", "o.embd", "--impostors", 2000,
               "--report", "e.json") == EXIT_OK
    assert json.loads(open("e.json").read())["warnings"]


def test_map_on_embd(workdir):
    run("synth", "--ids", 6, "--samples", 2, *SMALL, "--out", "p.embp")
    run("train", "--data", "p.embp", "--model", "mlp", *WIDTHS, "--epochs", 1, "--out", "m.femw")
    ds = formats.load_dataset("p.embp")
    formats.save_embeddings("s.embd", ds.labels, ds.source)
    assert run("map", "--model", "m.femw", "--data", "s.embd", "--out", "o.embd") == 0
    assert run("map", "--model", "m.femw", "--data", "p.embp", "--out", "o2.embd") == 0
    assert formats.load_embeddings("o.embd")[1].tobytes() == \
        formats.load_embeddings("o2.embd")[1].tobytes()


def test_far_monotone(workdir):
    run("synth", "--ids", 50, "--samples", 3, *SMALL, "--out", "p.embp")
    run("eval", "--data", "p.embp", "--far", 0.01, "--impostors", 20000, "--report", "a.json")
    run("eval", "--data", "p.embp", "--far", 0.001, "--impostors", 20000, "--report", "b.json")
    ta = json.loads(open("a.json").read())["results"]["threshold"]["value"]
    tb = json.loads(open("b.json").read())["results"]["threshold"]["value"]
    assert tb >= ta


def test_leak_trend_through_cli(workdir):
    """Model trained on complete embeddings; 0.9-leaked probes score at least as well as 0.5."""
    run("synth", "--ids", 120, "--samples", 5, "--seed", 42, *SMALL, "--out", "tr.embp")
    run("synth", "--ids", 30, "--samples", 5, "--seed", 43, "--encoder-seed", 42, *SMALL,
        "--first-label", 1000, "--out", "te.embp")
    run("train", "--data", "tr.embp", "--model", "mlp", *WIDTHS, "--out", "m.femw")
    means = {}
    for f in (0.9, 0.5):
        run("leak", "--data", "te.embp", "--fraction", f, "--out", f"l{f}.embp")
        run("map", "--model", "m.femw", "--data", f"l{f}.embp", "--out", f"m{f}.embd")
        run("eval", "--data", f"l{f}.embp", "--mapped", f"m{f}.embd", "--impostors", 20000,
            "--report", f"e{f}.json")
        means[f] = json.loads(open(f"e{f}.json").read())["results"]["mean_cosine"]
    assert means[0.9] >= means[0.5]
