"""Retrieve a known PLN-Tree and compare it with the flat PLN baseline.

Draws 2000 samples from a reference PLN-Tree, trains the backward model and
the leaf-level PLN on them, then measures how well each reproduces the
Shannon diversity distribution at every layer.

Run from the repository root::

    python3 demos/retrieval.py [epochs]
"""

import sys

from plntree import baselines as bl
from plntree import pipeline as pp
from plntree.model import generate
from plntree.training import TrainConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 100

tree = bl.synthetic_tree()
reference = bl.reference_plntree(tree, seed=0)
data = generate(reference, 2000, seed=1)
print(f"tree layers {tree.layer_sizes}, {len(data)} samples")

settings = pp.FitSettings(training=TrainConfig(epochs=epochs, lr=1e-3))
protocol = pp.BenchmarkProtocol(repetitions=5, wasserstein=False)
report = pp.BenchmarkReport()
for kind in ("plntree", "pln"):
    fitted = pp.fit(kind, data, settings)
    pp.evaluate_generation(report, kind, fitted, data, protocol)

# smaller is better: distance between Shannon distributions of data and samples
print("layer  plntree   pln")
for l in range(1, tree.n_layers + 1):
    a = report.value("plntree", "shannon_wasserstein", l)
    b = report.value("pln", "shannon_wasserstein", l)
    print(f"{l:5d}  {a:.4f}   {b:.4f}")
