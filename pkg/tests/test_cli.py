import csv
import hashlib
import json

import numpy as np
import pytest

from plntree import cli
from plntree.pipeline import BenchmarkReport, emit_plot_data


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_ok(*argv):
    code = cli.run([str(a) for a in argv])
    assert code == 0, argv
    return code


def error_of(capsys, *argv):
    capsys.readouterr()
    code = cli.run([str(a) for a in argv])
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == code and err["message"]
    return code, err


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """A small simulated dataset and a briefly trained PLN-Tree fit."""
    root = tmp_path_factory.mktemp("toy")
    cfg = {"format_version": 1, "seed": 0, "training": {"epochs": 3, "lr": 0.01},
           "model": {"variational": {"kind": "backward", "embedding_dim": 4, "hidden_size": 4,
                                     "n_stacked_layers": 1}}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    run_ok("simulate", "plntree", "-n", 80, "--seed", 1, "--out", root / "sim")
    snap = json.loads((root / "sim" / "config.json").read_text())
    (root / "tree.json").write_text(json.dumps(snap["tree"]))
    run_ok("fit", "--config", root / "cfg.json", "--tree", root / "tree.json",
           "--data", root / "sim" / "dataset.csv", "--out", root / "fit")
    return root


# -- simulate --------------------------------------------------------------------------


def test_simulate_markov_dirichlet_deterministic(tmp_path):
    for d in ("a", "b"):
        run_ok("simulate", "markov-dirichlet", "-n", 2000, "--seed", 7, "--out", tmp_path / d)
    run_ok("simulate", "markov-dirichlet", "-n", 2000, "--seed", 8, "--out", tmp_path / "c")
    a, b, c = (sha(tmp_path / d / "dataset.csv") for d in "abc")
    assert a == b != c
    snap = json.loads((tmp_path / "a" / "config.json").read_text())
    assert snap["seed"] == 7 and snap["simulate"]["n"] == 2000
    assert snap["tree"]["layer_sizes"] == [4, 10, 20]
    rows = read_rows(tmp_path / "a" / "dataset.csv")
    assert len(rows) == 2001 and rows[0][0] == "sample_id" and len(rows[0]) == 35


@pytest.mark.parametrize("generator", ["markov-dirichlet", "plntree"])
def test_snapshot_reproduces_run(tmp_path, generator):
    run_ok("simulate", generator, "-n", 150, "--seed", 3, "--out", tmp_path / "a")
    run_ok("simulate", generator, "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "b")
    assert sha(tmp_path / "a" / "dataset.csv") == sha(tmp_path / "b" / "dataset.csv")
    assert (tmp_path / "a" / "config.json").read_text() == (tmp_path / "b" / "config.json").read_text()


def test_fit_snapshot_reproduces_model(toy_run, tmp_path):
    run_ok("fit", "--config", toy_run / "fit" / "config.json", "--out", tmp_path)
    assert sha(tmp_path / "model.json") == sha(toy_run / "fit" / "model.json")
    trace = read_rows(tmp_path / "trace.csv")
    assert trace[0] == ["iteration", "elbo", "wall_ms"]
    assert [r[:2] for r in trace] == [r[:2] for r in read_rows(toy_run / "fit" / "trace.csv")]


# -- generate / encode / evaluate ------------------------------------------------------


def test_generate_deterministic(toy_run, tmp_path):
    model = toy_run / "fit" / "model.json"
    run_ok("generate", "--model", model, "-n", 40, "--seed", 2, "--out", tmp_path / "a")
    run_ok("generate", "--model", model, "-n", 40, "--seed", 2, "--out", tmp_path / "b")
    assert sha(tmp_path / "a" / "samples.csv") == sha(tmp_path / "b" / "samples.csv")
    assert len(read_rows(tmp_path / "a" / "samples.csv")) == 41


@pytest.mark.parametrize("kind", ["lp-clr", "latent", "clr", "proportions"])
def test_encode_header(toy_run, tmp_path, kind):
    run_ok("encode", "--model", toy_run / "fit" / "model.json", "--data",
           toy_run / "sim" / "dataset.csv", "--features", kind, "--n-draws", 5, "--out", tmp_path)
    rows = read_rows(tmp_path / "features.csv")
    assert rows[0][0] == "sample_id" and len(rows) == 81
    assert all(c.startswith(kind + "_") for c in rows[0][1:])
    layer, node = rows[0][1][len(kind) + 1:].split("_")
    assert int(layer) >= 1 and int(node) >= 0


def test_evaluate_alpha_and_wasserstein(toy_run, tmp_path):
    sim = toy_run / "sim"
    run_ok("generate", "--model", toy_run / "fit" / "model.json", "-n", 80, "--out", tmp_path / "g")
    for what in ("alpha", "wasserstein"):
        run_ok("evaluate", what, "--config", sim / "config.json", "--reference", sim / "dataset.csv",
               "--generated", tmp_path / "g" / "samples.csv", sim / "dataset.csv",
               "--out", tmp_path / what)
        rows = read_rows(tmp_path / what / "metrics.csv")
        assert rows[0] == ["metric", "layer", "value", "sd"]
        assert all(float(r[2]) >= 0 and float(r[3]) >= 0 for r in rows[1:])
        json.loads((tmp_path / what / "report.json").read_text())
    alpha = read_rows(tmp_path / "alpha" / "metrics.csv")
    # 2 indices x 4 distances x 3 layers
    assert len(alpha) == 1 + 24


def test_evaluate_reconstruction(toy_run, tmp_path):
    run_ok("evaluate", "reconstruction", "--model", toy_run / "fit" / "model.json", "--data",
           toy_run / "sim" / "dataset.csv", "--out", tmp_path)
    rows = read_rows(tmp_path / "metrics.csv")
    assert [r[:2] for r in rows[1:]] == [["reconstruction", str(l)] for l in (1, 2, 3)]
    assert all(-1 <= float(r[2]) <= 1 for r in rows[1:])


def test_evaluate_beta_counts(tmp_path):
    run_ok("simulate", "markov-dirichlet", "-n", 60, "--seed", 1, "--out", tmp_path / "a")
    run_ok("simulate", "markov-dirichlet", "-n", 60, "--seed", 2, "--out", tmp_path / "b")
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    cfg["evaluation"] = {"beta_group": 30, "beta_repetitions": 4, "n_perm": 99}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    run_ok("evaluate", "beta", "--config", tmp_path / "cfg.json", "--reference",
           tmp_path / "a" / "dataset.csv", "--generated", tmp_path / "b" / "dataset.csv",
           "--out", tmp_path / "e")
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    for test in ("permanova", "permdisp"):
        assert len(rep[test]) == 3
        for ps in rep[test].values():
            assert len(ps) == 4 and all(0.01 <= p <= 1 for p in ps)
    rows = read_rows(tmp_path / "e" / "metrics.csv")
    assert len(rows) == 1 + 3 * 2 * 2


# -- benchmark and plot data -----------------------------------------------------------


def test_emit_plot_data_cardinality(tmp_path):
    assert emit_plot_data(BenchmarkReport()) == "model,metric,layer,repetition,value\n"
    rep = BenchmarkReport()
    for r in range(3):
        rep.add("PLN", "emd", 1, r, 0.5)
    assert len(emit_plot_data(rep).splitlines()) == 1 + 3
    rep = BenchmarkReport()
    models, metrics, layers, M = ["a", "b"], ["x", "y", "z"], [1, 2], 4
    for m in models:
        for met in metrics:
            for l in layers:
                for r in range(M):
                    rep.add(m, met, l, r, r / 3)
    emit_plot_data(rep, tmp_path / "p.csv")
    rows = read_rows(tmp_path / "p.csv")
    assert len(rows) == 1 + len(models) * len(metrics) * len(layers) * M
    assert float(rows[2][4]) == 1 / 3
    table = rep.table()
    assert len(table) == 12 and table[0][5] == M


def test_benchmark_standin(tmp_path):
    run_ok("benchmark", "--standin", "--kinds", "plntree", "pln", "spiec-easi", "--epochs", 2,
           "--repetitions", 2, "--n-samples", 40, "--seed", 0, "--out", tmp_path)
    for name in ("benchmark.json", "benchmark.csv", "plot_data.csv", "config.json",
                 "model_plntree.json", "model_pln.json", "model_spiec-easi.json"):
        assert (tmp_path / name).exists(), name
    snap = json.loads((tmp_path / "config.json").read_text())
    n_layers = len(snap["tree"]["layer_sizes"])
    plot = read_rows(tmp_path / "plot_data.csv")
    # 3 models x (8 alpha metrics + emd) x layers x 2 repetitions
    assert len(plot) == 1 + 3 * 9 * n_layers * 2
    table = read_rows(tmp_path / "benchmark.csv")
    assert table[0] == ["model", "metric", "layer", "mean", "sd", "n"]
    assert len(table) == 1 + 3 * 9 * n_layers and all(r[5] == "2" for r in table[1:])


# -- errors ----------------------------------------------------------------------------


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"format_version": 1, "trainig": {}}))
    assert error_of(capsys, "fit", "--config", tmp_path / "bad.json")[0] == 2
    (tmp_path / "bad.json").write_text(json.dumps({"format_version": 1, "training": {"epoch": 3}}))
    code, err = error_of(capsys, "fit", "--config", tmp_path / "bad.json", "--tree", "x.json")
    assert code in (2, 3)
    (tmp_path / "v.json").write_text(json.dumps({"seed": 0}))
    assert error_of(capsys, "simulate", "plntree", "--config", tmp_path / "v.json")[0] == 2
    assert error_of(capsys, "simulate", "plntree", "--config", tmp_path / "none.json")[0] == 2
    assert error_of(capsys, "fit", "--out", tmp_path)[0] == 2
    assert cli.run(["no-such-command"]) == 2


def test_unknown_training_key_exit_2(toy_run, tmp_path, capsys):
    cfg = {"format_version": 1, "training": {"epoch": 3}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, err = error_of(capsys, "fit", "--config", tmp_path / "c.json", "--tree",
                         toy_run / "tree.json", "--data", toy_run / "sim" / "dataset.csv",
                         "--out", tmp_path)
    assert code == 2 and "epoch" in err["message"]


def test_data_errors_exit_3(toy_run, tmp_path, capsys):
    sim = toy_run / "sim"
    rows = read_rows(sim / "dataset.csv")
    rows[1][1] = str(int(rows[1][1]) + 1)  # break a parent-equals-children sum
    with open(tmp_path / "bad.csv", "w", newline="") as f:
        csv.writer(f).writerows(rows)
    code, err = error_of(capsys, "fit", "--tree", toy_run / "tree.json", "--data", tmp_path / "bad.csv",
                         "--out", tmp_path)
    assert code == 3
    (tmp_path / "m.json").write_text("{broken")
    assert error_of(capsys, "generate", "--model", tmp_path / "m.json", "-n", 3,
                    "--out", tmp_path)[0] == 3


def test_numeric_errors_exit_4(toy_run, tmp_path, capsys):
    cfg = {"format_version": 1, "training": {"epochs": 50, "lr": 1e6, "closed_form": False}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, err = error_of(capsys, "fit", "--config", tmp_path / "c.json", "--tree",
                         toy_run / "tree.json", "--data", toy_run / "sim" / "dataset.csv",
                         "--out", tmp_path)
    assert code == 4, err
