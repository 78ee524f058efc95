"""Uniform handling of the four model kinds and the benchmark aggregation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import diversity as dv
from . import modelfile
from .hierarchy import HierarchicalDataset, TreeLayout
from .model import ModelArch, generate
from .training import TrainConfig, train
from .variational import BackwardArch, MeanFieldArch, encode, reconstruct

log = logging.getLogger(__name__)

INDICES = ("shannon", "simpson")
ALPHA_DISTANCES = ("wasserstein", "ks", "tv", "kl")
MODEL_LABELS = {"plntree": "PLN-Tree", "plntree-mf": "PLN-Tree (MF)", "pln": "PLN",
                "spiec-easi": "SPiEC-Easi"}


@dataclass
class FitSettings:
    """Everything needed to fit one model kind."""

    model_arch: ModelArch | None = None
    backward: BackwardArch = field(default_factory=BackwardArch)
    mean_field: MeanFieldArch = field(default_factory=MeanFieldArch)
    training: TrainConfig = field(default_factory=TrainConfig)
    pln: bl.PlnFitConfig = field(default_factory=bl.PlnFitConfig)
    pseudocount: float = 1.0


class Fitted:
    """A fitted model of any kind behind one interface."""

    def __init__(self, kind: str, tree: TreeLayout, obj, report=None):
        if kind not in modelfile.MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind, self.tree, self.obj, self.report = kind, tree, obj, report

    @property
    def hierarchical(self) -> bool:
        return self.kind in ("plntree", "plntree-mf")

    def generate(self, n: int, seed, covariates=None) -> HierarchicalDataset:
        if self.kind == "pln":
            return bl.pln_generate(self.tree, self.obj, n, seed)
        if self.kind == "spiec-easi":
            return bl.spiec_generate(self.tree, self.obj, n, seed)
        model, _ = self.obj
        return generate(model, n, seed, covariates)

    def _need_posterior(self, what):
        if not self.hierarchical:
            raise ValueError(f"{what} needs a PLN-Tree model, not {self.kind!r}")
        return self.obj

    def encode(self, layers, n_draws=100, seed=0, covariates=None) -> list:
        model, fam = self._need_posterior("encoding")
        if fam is None:
            raise ValueError("this model file holds no variational family")
        return encode(fam, model, layers, n_draws, seed, covariates)

    def reconstruct(self, layers, n_draws=100, seed=0, covariates=None) -> list:
        model, fam = self._need_posterior("reconstruction")
        if fam is None:
            raise ValueError("this model file holds no variational family")
        return reconstruct(fam, model, layers, n_draws, seed, covariates)

    def document(self, extra=None) -> dict:
        if self.hierarchical:
            model, fam = self.obj
            return modelfile.model_document(model, fam, self.kind, extra)
        return modelfile.baseline_document(self.tree, self.obj, extra)

    @classmethod
    def load(cls, path):
        kind, tree, obj = modelfile.load(path)
        return cls(kind, tree, obj)


def fit(kind: str, data: HierarchicalDataset, settings: FitSettings | None = None,
        progress=None) -> Fitted:
    settings = settings or FitSettings()
    if kind in ("plntree", "plntree-mf"):
        fam_arch = settings.backward if kind == "plntree" else settings.mean_field
        model, fam, report = train(data, settings.model_arch, fam_arch, settings.training,
                                   progress=progress)
        return Fitted(kind, data.tree, (model, fam), report)
    if kind == "pln":
        return Fitted(kind, data.tree, bl.pln_fit(data.leaves, settings.pln))
    if kind == "spiec-easi":
        return Fitted(kind, data.tree, bl.spiec_fit(data.leaves, settings.pseudocount))
    raise ValueError(f"unknown model kind {kind!r}")


# -- benchmark report -----------------------------------------------------------------


@dataclass
class BenchmarkReport:
    """Per-repetition metric records ``(model, metric, layer, repetition, value)``.

    Layers are 1-based in every emitted table.
    """

    records: list = field(default_factory=list)

    def add(self, model, metric, layer, repetition, value):
        self.records.append((model, metric, int(layer), int(repetition), float(value)))

    def table(self) -> list:
        """Rows ``(model, metric, layer, mean, sd, n)`` in first-seen order."""
        groups = {}
        for m, met, l, _, v in self.records:
            groups.setdefault((m, met, l), []).append(v)
        rows = []
        for (m, met, l), vals in groups.items():
            a = np.asarray(vals)
            sd = float(a.std(ddof=1)) if a.size > 1 else 0.0
            rows.append((m, met, l, float(a.mean()), sd, int(a.size)))
        return rows

    def rejection_rates(self, level=0.05) -> list:
        """Share of p-values below ``level`` for the permutation-test metrics."""
        out = []
        for m, met, l, mean, sd, n in self.table():
            if met in ("permanova", "permdisp"):
                vals = [v for mm, me, ll, _, v in self.records if (mm, me, ll) == (m, met, l)]
                out.append((m, met, l, float(np.mean(np.asarray(vals) < level)), n))
        return out

    def value(self, model, metric, layer) -> float:
        for m, met, l, mean, *_ in self.table():
            if (m, met, l) == (model, metric, layer):
                return mean
        raise KeyError((model, metric, layer))

    def to_json_dict(self) -> dict:
        return {
            "table": [dict(zip(("model", "metric", "layer", "mean", "sd", "n"), r))
                      for r in self.table()],
            "rejection_rates": [dict(zip(("model", "metric", "layer", "rate", "n"), r))
                                for r in self.rejection_rates()],
        }


def emit_plot_data(report: BenchmarkReport, path_or_buf=None) -> str:
    """Long-format CSV ``model,metric,layer,repetition,value``. Returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "layer", "repetition", "value"])
    for m, met, l, r, v in report.records:
        w.writerow([m, met, l, r, repr(v)])
    text = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as f:
                f.write(text)
    return text


def write_table_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "metric", "layer", "mean", "sd", "n"])
        for m, met, l, mean, sd, n in report.table():
            w.writerow([m, met, l, repr(mean), repr(sd), n])


@dataclass
class BenchmarkProtocol:
    repetitions: int = 10
    n_samples: int | None = None
    alpha: bool = True
    wasserstein: bool = True
    beta: bool = False
    beta_group: int = 100
    beta_repetitions: int = 50
    n_perm: int = 999
    emd_points: int = dv.EMD_MAX
    seed: int = 0


def evaluate_generation(report: BenchmarkReport, name: str, fitted: Fitted,
                        reference: HierarchicalDataset, protocol: BenchmarkProtocol):
    """Sample ``protocol.repetitions`` datasets and record every metric."""
    n = protocol.n_samples or len(reference)
    ref = reference.layers
    ss = np.random.SeedSequence(protocol.seed)
    for r, child in enumerate(ss.spawn(protocol.repetitions)):
        s_gen, s_eval = child.spawn(2)
        gen = fitted.generate(n, s_gen).layers
        if protocol.alpha:
            for (iname, dname, l), v in dv.alpha_distances(ref, gen, INDICES, ALPHA_DISTANCES).items():
                report.add(name, f"{iname}_{dname}", l + 1, r, v)
        if protocol.wasserstein:
            seed = int(s_eval.generate_state(1)[0])
            for l, v in dv.wasserstein_layers(ref, gen, protocol.emd_points, seed).items():
                report.add(name, "emd", l + 1, r, v)
    if protocol.beta:
        gen = fitted.generate(max(n, protocol.beta_group), ss.spawn(1)[0]).layers
        for l in range(reference.tree.n_layers):
            res = dv.beta_tests(ref, gen, l, protocol.beta_group, protocol.beta_repetitions,
                                protocol.n_perm, protocol.seed + l)
            for t, ps in res.items():
                for r, p in enumerate(ps):
                    report.add(name, t, l + 1, r, p)


def evaluate_reconstruction(report: BenchmarkReport, name: str, fitted: Fitted,
                            test: HierarchicalDataset, seed=0):
    rec = fitted.reconstruct(test.layers, seed=seed, covariates=test.covariates)
    for l, v in enumerate(dv.reconstruction_correlation(test.layers, rec)):
        report.add(name, "reconstruction", l + 1, 0, v)


def benchmark(data: HierarchicalDataset, kinds=("plntree", "plntree-mf", "pln", "spiec-easi"),
              settings: FitSettings | None = None, protocol: BenchmarkProtocol | None = None,
              test: HierarchicalDataset | None = None, fitted: dict | None = None,
              progress=None):
    """Fit (or reuse) every model kind and aggregate the generation metrics.

    Returns
    -------
    (BenchmarkReport, dict of Fitted)
    """
    protocol = protocol or BenchmarkProtocol()
    fitted = dict(fitted or {})
    report = BenchmarkReport()
    for kind in kinds:
        if kind not in fitted:
            if progress:
                progress(f"fitting {kind}")
            fitted[kind] = fit(kind, data, settings)
        if progress:
            progress(f"evaluating {kind}")
        evaluate_generation(report, MODEL_LABELS[kind], fitted[kind], data, protocol)
        if test is not None and fitted[kind].hierarchical:
            evaluate_reconstruction(report, MODEL_LABELS[kind], fitted[kind], test, protocol.seed)
    return report, fitted
