"""Command-line interface: simulate, fit, generate, encode, evaluate, benchmark.

Artifacts go to ``--out``; progress goes to stdout; failures print one JSON
object on stderr and exit with 2 (configuration), 3 (data) or 4 (numerics).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import baselines as bl
from . import diversity as dv
from . import modelfile
from . import pipeline as pp
from .autodiff import CholeskyError
from .features import FEATURE_KINDS, feature_matrix
from .hierarchy import (CountsError, HierarchicalDataset, TreeError, load_tree, parse_tree,
                        read_counts_csv, read_covariates_csv, read_leaf_csv, write_counts_csv)
from .model import ModelArch, generate
from .training import NonFiniteElbo, TrainConfig, TrainingDiverged, write_trace_csv
from .variational import arch_from_dict

log = logging.getLogger("plntree")

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_SECTIONS = {"format_version", "seed", "tree", "data", "model", "training", "pln",
                   "pseudocount", "simulate", "evaluation", "benchmark", "run"}


class ConfigError(ValueError):
    pass


# -- configuration --------------------------------------------------------------------


def _strict(cls, section: dict, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path=None) -> dict:
    """Read and check a run configuration; ``None`` gives the empty config."""
    if path is None:
        return {"format_version": FORMAT_VERSION}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"config needs \"format_version\": {FORMAT_VERSION}")
    unknown = set(cfg) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def fit_settings(cfg: dict) -> pp.FitSettings:
    s = pp.FitSettings()
    model = cfg.get("model", {})
    unknown = set(model) - {"kind", "arch", "variational"}
    if unknown:
        raise ConfigError(f"unknown keys in model: {sorted(unknown)}")
    if "arch" in model:
        s.model_arch = _strict(ModelArch, model["arch"], "model.arch")
    if "variational" in model:
        try:
            fam = arch_from_dict(model["variational"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"model.variational: {e}") from e
        if fam.to_dict()["kind"] == "backward":
            s.backward = fam
        else:
            s.mean_field = fam
    train = dict(cfg.get("training", {}))
    if "seed" in cfg and "seed" not in train:
        train["seed"] = cfg["seed"]
    s.training = _strict(TrainConfig, train, "training")
    s.pln = _strict(bl.PlnFitConfig, cfg.get("pln", {}), "pln")
    s.pseudocount = float(cfg.get("pseudocount", 1.0))
    return s


def _snapshot(cfg: dict, out: Path, run: dict, **resolved):
    """Write the resolved configuration; ``run`` records the command line values."""
    snap = dict(cfg)
    snap.update({k: v for k, v in resolved.items() if v is not None})
    snap["run"] = {k: v for k, v in run.items() if v is not None}
    unknown = set(snap) - CONFIG_SECTIONS
    assert not unknown, unknown
    (out / "config.json").write_text(json.dumps(snap, sort_keys=True, indent=1) + "\n")


# -- inputs ---------------------------------------------------------------------------


def _tree(args, cfg):
    src = getattr(args, "tree", None) or cfg.get("tree")
    if src is None:
        return None
    if isinstance(src, dict):
        return parse_tree(src)
    return load_tree(src)


def _need_tree(args, cfg):
    tree = _tree(args, cfg)
    if tree is None:
        raise ConfigError("a tree is required (--tree or the config's \"tree\")")
    return tree


def _dataset(tree, counts=None, leaves=None, covariates=None, what="data"):
    if counts and leaves:
        raise ConfigError(f"give either counts or leaves for {what}, not both")
    if counts:
        data = read_counts_csv(tree, counts)
    elif leaves:
        data = read_leaf_csv(tree, leaves)
    else:
        raise ConfigError(f"{what} needs a counts or leaf CSV")
    if covariates:
        data.covariates = read_covariates_csv(covariates, data.sample_ids)
    return data


def _data_from(args, cfg, tree, prefix=""):
    d = cfg.get("data", {})
    counts = getattr(args, prefix + "data", None) or d.get(prefix + "counts")
    leaves = getattr(args, prefix + "leaves", None) or d.get(prefix + "leaves")
    cov = getattr(args, prefix + "covariates", None) or d.get(prefix + "covariates")
    return _dataset(tree, counts, leaves, cov, prefix + "data" if prefix else "data")


def _data_section(args, cfg):
    d = dict(cfg.get("data", {}))
    for arg, key in (("data", "counts"), ("leaves", "leaves"), ("covariates", "covariates")):
        if getattr(args, arg, None):
            d[key] = str(Path(getattr(args, arg)).resolve())
    return d


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(msg):
    print(msg, flush=True)


# -- subcommands ----------------------------------------------------------------------


def cmd_simulate(args, cfg):
    sim = dict(cfg.get("simulate", {}))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    n = args.n or sim.pop("n", 2000)
    sim.pop("n", None)
    out = _out(args)
    resolved = {"seed": seed}
    if args.generator == "markov-dirichlet":
        tree = _tree(args, cfg) or bl.markov_dirichlet_tree()
        mdc = bl.MarkovDirichletConfig(tree, **_md_overrides(args, sim))
        data = bl.markov_dirichlet_sample(mdc, n, seed)
        md = mdc.to_dict()
        resolved["tree"] = md.pop("tree")
        resolved["simulate"] = {"n": n, **md}
    else:
        if args.model:
            fitted = pp.Fitted.load(args.model)
            if not fitted.hierarchical:
                raise ConfigError("simulate plntree needs a PLN-Tree model file")
            model = fitted.obj[0]
        else:
            tree = _tree(args, cfg) or bl.synthetic_tree()
            sim = {k: v for k, v in sim.items() if v is not None}
            unknown = set(sim) - {"model_seed", "mu1", "sigma1"}
            if unknown:
                raise ConfigError(f"unknown keys in simulate: {sorted(unknown)}")
            model_seed = int(sim.get("model_seed", 0))
            model = bl.reference_plntree(tree, model_seed, sim.get("mu1"), sim.get("sigma1"))
            modelfile.save(out / "reference_model.json", modelfile.model_document(model))
            resolved["tree"] = tree.to_dict()
            resolved["simulate"] = {"n": n, "model_seed": model_seed, "mu1": sim.get("mu1"),
                                    "sigma1": sim.get("sigma1")}
        data = generate(model, n, seed)
    write_counts_csv(data, out / "dataset.csv")
    _snapshot(cfg, out, {"command": "simulate", "generator": args.generator, "model": args.model},
              **resolved)
    _say(f"wrote {len(data)} samples to {out / 'dataset.csv'}")


def _md_overrides(args, sim):
    over = dict(sim)
    for key in ("edge_prob", "v", "u", "N"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    known = {f.name for f in fields(bl.MarkovDirichletConfig)} - {"tree"}
    unknown = set(over) - known
    if unknown:
        raise ConfigError(f"unknown keys in simulate: {sorted(unknown)}")
    return over


def cmd_fit(args, cfg):
    tree = _need_tree(args, cfg)
    data = _data_from(args, cfg, tree)
    kind = args.kind or cfg.get("model", {}).get("kind", "plntree")
    if kind not in modelfile.MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    settings = fit_settings(cfg)
    if args.epochs is not None:
        settings.training.epochs = args.epochs
    if args.seed is not None:
        settings.training.seed = args.seed
    out = _out(args)
    fitted = pp.fit(kind, data, settings,
                    progress=lambda e, v: _say(f"epoch {e + 1}: elbo {v:.4f}"))
    modelfile.save(out / "model.json", fitted.document())
    if fitted.report is not None:
        write_trace_csv(fitted.report, out / "trace.csv")
    model_sec = dict(cfg.get("model", {}), kind=kind)
    _snapshot(cfg, out, {"command": "fit", "data": args.data, "leaves": args.leaves,
                         "covariates": args.covariates},
              model=model_sec, training=settings.training.to_dict(), tree=tree.to_dict(),
              data=_data_section(args, cfg))
    _say(f"saved {kind} model to {out / 'model.json'}")


def _read_plain_covariates(path):
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if not rows or rows[0][0] != "sample_id":
        raise CountsError("covariates file must start with a sample_id column")
    return np.asarray([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)


def cmd_generate(args, cfg):
    fitted = pp.Fitted.load(args.model)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    cov = _read_plain_covariates(args.covariates) if args.covariates else None
    n = args.n
    if cov is not None:
        if n is not None and n != cov.shape[0]:
            raise ConfigError("-n must match the number of covariate rows")
        n = cov.shape[0]
    if n is None or n < 1:
        raise ConfigError("-n must be a positive sample count")
    out = _out(args)
    data = fitted.generate(n, seed, cov) if fitted.hierarchical else fitted.generate(n, seed)
    write_counts_csv(data, out / "samples.csv")
    _snapshot(cfg, out, {"command": "generate", "model": str(args.model), "n": n,
                         "covariates": args.covariates}, seed=seed)
    _say(f"wrote {n} samples to {out / 'samples.csv'}")


def cmd_encode(args, cfg):
    fitted = pp.Fitted.load(args.model) if args.model else None
    tree = fitted.tree if fitted else _need_tree(args, cfg)
    data = _data_from(args, cfg, tree)
    kind = args.features
    Z = None
    if kind not in ("clr", "proportions"):
        if fitted is None:
            raise ConfigError(f"{kind} features need --model")
        Z = fitted.encode(data.layers, args.n_draws, args.seed, data.covariates)
    F, cols = feature_matrix(tree, kind, Z=Z, counts=data.layers, pseudocount=args.pseudocount)
    out = _out(args)
    with open(out / "features.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id"] + cols)
        for sid, row in zip(data.sample_ids, F):
            w.writerow([sid] + [repr(float(v)) for v in row])
    _snapshot(cfg, out, {"command": "encode", "features": kind, "model": args.model,
                         "n_draws": args.n_draws, "pseudocount": args.pseudocount}, seed=args.seed)
    _say(f"wrote {F.shape[1]} {kind} features for {F.shape[0]} samples")


def _write_metric_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "layer", "value", "sd"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])


def cmd_evaluate(args, cfg):
    out = _out(args)
    ev = cfg.get("evaluation", {})
    protocol = _strict(pp.BenchmarkProtocol, ev, "evaluation")
    seed = args.seed if args.seed is not None else protocol.seed
    report = dv.DiversityReport()
    rows = []
    if args.what == "reconstruction":
        if not args.model:
            raise ConfigError("evaluate reconstruction needs --model")
        fitted = pp.Fitted.load(args.model)
        test = _data_from(args, cfg, fitted.tree)
        rec = fitted.reconstruct(test.layers, seed=seed, covariates=test.covariates)
        report.reconstruction = dv.reconstruction_correlation(test.layers, rec)
        per_sample = _per_sample_corr(test.layers, rec)
        rows = [("reconstruction", l + 1, v, s)
                for l, (v, s) in enumerate(zip(report.reconstruction, per_sample))]
    else:
        tree = _need_tree(args, cfg)
        ref = _dataset(tree, args.reference, None, None, "reference")
        gens = [_dataset(tree, g, None, None, "generated") for g in args.generated or []]
        if not gens:
            raise ConfigError(f"evaluate {args.what} needs --generated")
        if args.what == "alpha":
            vals = {}
            for g in gens:
                for key, v in dv.alpha_distances(ref.layers, g.layers).items():
                    vals.setdefault(key, []).append(v)
            report.alpha = {k: float(np.mean(v)) for k, v in vals.items()}
            rows = [(f"{i}_{d}", l + 1, np.mean(v), _sd(v)) for (i, d, l), v in sorted(vals.items())]
        elif args.what == "wasserstein":
            vals = {}
            for j, g in enumerate(gens):
                for l, v in dv.wasserstein_layers(ref.layers, g.layers, protocol.emd_points,
                                                  seed + j).items():
                    vals.setdefault(l, []).append(v)
            report.wasserstein = {l: float(np.mean(v)) for l, v in vals.items()}
            rows = [("emd", l + 1, np.mean(v), _sd(v)) for l, v in sorted(vals.items())]
        else:
            g = gens[0]
            for l in range(tree.n_layers):
                res = dv.beta_tests(ref.layers, g.layers, l, protocol.beta_group,
                                    protocol.beta_repetitions, protocol.n_perm, seed + l)
                report.permanova[l] = res["permanova"]
                report.permdisp[l] = res["permdisp"]
                for t, ps in res.items():
                    rows.append((f"{t}_rejection_rate", l + 1, np.mean(np.asarray(ps) < 0.05), 0.0))
                    rows.append((f"{t}_pvalue", l + 1, np.mean(ps), _sd(ps)))
    (out / "report.json").write_text(json.dumps(report.to_json_dict(), sort_keys=True, indent=1)
                                     + "\n")
    _write_metric_csv(rows, out / "metrics.csv")
    _snapshot(cfg, out, {"command": "evaluate", "what": args.what, "reference": args.reference,
                         "generated": args.generated, "model": args.model},
              evaluation=dict(vars(protocol), seed=seed))
    _say(f"wrote {args.what} report to {out}")


def _sd(v):
    v = np.asarray(v, dtype=np.float64)
    return float(v.std(ddof=1)) if v.size > 1 else 0.0


def _per_sample_corr(orig, rec):
    out = []
    for x, y in zip(orig, rec):
        xc = x - x.mean(1, keepdims=True)
        yc = y - y.mean(1, keepdims=True)
        den = np.sqrt((xc * xc).sum(1) * (yc * yc).sum(1))
        ok = den > 0
        out.append(_sd((xc * yc).sum(1)[ok] / den[ok]))
    return out


def standin_paths():
    """Bundled 100-sample stand-in: (tree JSON path, leaf CSV path)."""
    base = resources.files("plntree") / "data"
    return base / "standin_tree.json", base / "standin_leaves.csv"


def cmd_benchmark(args, cfg):
    if args.standin:
        tpath, lpath = standin_paths()
        tree = load_tree(tpath)
        data = read_leaf_csv(tree, lpath)
    else:
        tree = _need_tree(args, cfg)
        data = _data_from(args, cfg, tree)
    test = None
    d = cfg.get("data", {})
    if args.test or d.get("test_counts") or d.get("test_leaves"):
        test = _dataset(tree, args.test or d.get("test_counts"), d.get("test_leaves"), None,
                        "test data")
    settings = fit_settings(cfg)
    if args.epochs is not None:
        settings.training.epochs = args.epochs
    protocol = _strict(pp.BenchmarkProtocol, cfg.get("evaluation", {}), "evaluation")
    if args.repetitions is not None:
        protocol.repetitions = args.repetitions
    if args.n_samples is not None:
        protocol.n_samples = args.n_samples
    if args.beta:
        protocol.beta = True
    bench = cfg.get("benchmark", {})
    unknown = set(bench) - {"kinds"}
    if unknown:
        raise ConfigError(f"unknown keys in benchmark: {sorted(unknown)}")
    kinds = args.kinds or bench.get("kinds") or list(modelfile.MODEL_KINDS)
    for k in kinds:
        if k not in modelfile.MODEL_KINDS:
            raise ConfigError(f"unknown model kind {k!r}")
    out = _out(args)
    report, fitted = pp.benchmark(data, kinds, settings, protocol, test, progress=_say)
    for kind, f in fitted.items():
        modelfile.save(out / f"model_{kind}.json", f.document())
    (out / "benchmark.json").write_text(json.dumps(report.to_json_dict(), sort_keys=True,
                                                   indent=1) + "\n")
    pp.write_table_csv(report, out / "benchmark.csv")
    pp.emit_plot_data(report, out / "plot_data.csv")
    _snapshot(cfg, out, {"command": "benchmark", "standin": args.standin, "test": args.test},
              tree=tree.to_dict(), training=settings.training.to_dict(),
              evaluation=vars(protocol), benchmark={"kinds": list(kinds)})
    _say(f"benchmark of {len(kinds)} models written to {out}")


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plntree", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tree", help="tree JSON")
        if data:
            sp.add_argument("--data", help="hierarchical counts CSV")
            sp.add_argument("--leaves", help="leaf-only counts CSV")
            sp.add_argument("--covariates", help="covariates CSV")

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    s.add_argument("generator", choices=("plntree", "markov-dirichlet"))
    common(s, data=False)
    s.add_argument("-n", "--n", type=int)
    s.add_argument("--model", help="PLN-Tree model file to sample from")
    s.add_argument("--edge-prob", dest="edge_prob", type=float)
    s.add_argument("--v", type=float)
    s.add_argument("--u", type=float)
    s.add_argument("--N", type=int, help="sampling effort")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a model")
    common(s)
    s.add_argument("--kind", choices=modelfile.MODEL_KINDS)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("generate", help="sample from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("-n", "--n", type=int)
    s.add_argument("--covariates", help="covariates of the new samples")
    s.add_argument("--config")
    s.add_argument("--out", default=".")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("encode", help="compute features of a dataset")
    common(s)
    s.add_argument("--model")
    s.add_argument("--features", choices=FEATURE_KINDS, default="lp-clr")
    s.add_argument("--n-draws", dest="n_draws", type=int, default=100)
    s.add_argument("--pseudocount", type=float, default=1.0)
    s.set_defaults(func=cmd_encode, seed=0)

    s = sub.add_parser("evaluate", help="compare datasets or score reconstructions")
    s.add_argument("what", choices=("alpha", "beta", "wasserstein", "reconstruction"))
    common(s)
    s.add_argument("--reference", help="reference counts CSV")
    s.add_argument("--generated", nargs="+", help="generated counts CSV(s)")
    s.add_argument("--model", help="model file (reconstruction)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("benchmark", help="fit all models and aggregate generation metrics")
    common(s)
    s.add_argument("--test", help="held-out counts CSV for reconstruction")
    s.add_argument("--kinds", nargs="+")
    s.add_argument("--standin", action="store_true", help="use the bundled 100-sample data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--n-samples", dest="n_samples", type=int)
    s.add_argument("--beta", action="store_true", help="also run the permutation tests")
    s.set_defaults(func=cmd_benchmark)
    return p


_DATA_ERRORS = (CountsError, TreeError, modelfile.ModelFileError, FileNotFoundError,
                IsADirectoryError, UnicodeDecodeError)
_NUMERIC_ERRORS = (FloatingPointError, TrainingDiverged, CholeskyError, NonFiniteElbo,
                   np.linalg.LinAlgError)


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = load_config(getattr(args, "config", None))
        args.func(args, cfg)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except _NUMERIC_ERRORS as e:
        return _fail(EXIT_NUMERIC, e)
    except _DATA_ERRORS as e:
        return _fail(EXIT_DATA, e)
    except ValueError as e:
        return _fail(EXIT_CONFIG, e)
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
