import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from plntree import autodiff as ad
from plntree import baselines as bl
from plntree.features import clr
from plntree.hierarchy import HierarchicalDataset, TreeLayout, validate_counts
from plntree.model import PlnTree
from plntree.training import elbo_terms
from plntree.variational import MeanFieldVariational, PosteriorDraw, make_batch


def assert_compositional(data):
    for i in range(len(data)):
        validate_counts(data.tree, [x[i] for x in data.layers])


def test_empty_graph_precision():
    Om = bl.precision_from_graph(np.zeros((5, 5)), 0.3, 0.1)
    assert np.allclose(Om, 0.1 * np.eye(5), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_precision_is_pd(K, p, seed):
    G = bl.adjacency(K, p, np.random.default_rng(seed))
    assert np.array_equal(G, G.T) and np.all(np.diag(G) == 0)
    Om = bl.precision_from_graph(G, 0.3, 0.1)
    assert np.linalg.eigvalsh(Om).min() >= 0.1 - 1e-8


def test_config_validation():
    tree = bl.markov_dirichlet_tree()
    with pytest.raises(ValueError):
        bl.MarkovDirichletConfig(tree, v=0)
    with pytest.raises(ValueError):
        bl.MarkovDirichletConfig(tree, graph="scale-free")
    with pytest.raises(ValueError):
        bl.MarkovDirichletConfig(tree, effort="negative-binomial")
    with pytest.raises(ValueError):
        bl.MarkovDirichletConfig(tree, N=0)


def test_markov_dirichlet_deterministic_and_valid():
    cfg = bl.MarkovDirichletConfig(bl.markov_dirichlet_tree())
    a = bl.markov_dirichlet_sample(cfg, 50, 3)
    b = bl.markov_dirichlet_sample(cfg, 50, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.layers, b.layers))
    assert np.all(a.layers[0].sum(1) == 20000)
    assert_compositional(a)
    c = bl.markov_dirichlet_sample(cfg, 50, 4)
    assert not np.array_equal(a.layers[-1], c.layers[-1])


def test_markov_dirichlet_negative_binomial_effort():
    cfg = bl.MarkovDirichletConfig(bl.markov_dirichlet_tree(), effort="negative-binomial",
                                   nb_r=5.0, nb_p=5 / 2005)
    d = bl.markov_dirichlet_sample(cfg, 400, 0)
    tot = d.layers[0].sum(1)
    assert np.all(tot >= 1) and abs(tot.mean() - 2000) < 4 * math.sqrt(2000 ** 2 / 5 / 400) + 50
    assert_compositional(d)


def test_symmetric_concentrations(monkeypatch):
    tree = TreeLayout([2, 5], [[0, 0, 0, 1, 1]])
    build = bl._build

    def constant_nets(cfg):
        parts = build(cfg)
        parts.nets = {key: (np.zeros_like(W), np.full_like(b, 0.7)) for key, (W, b) in parts.nets.items()}
        return parts

    monkeypatch.setattr(bl, "_build", constant_nets)
    n = 100_000
    d = bl.markov_dirichlet_sample(bl.MarkovDirichletConfig(tree, N=60), n, 1)
    for k, ch in enumerate(tree.sibling_groups(1)):
        ratio = d.layers[1][:, ch] - d.layers[0][:, [k]] / ch.size
        se = ratio.std(0) / math.sqrt(n)
        assert np.all(np.abs(ratio.mean(0)) < 4 * se)


def test_dirichlet_all_zero_gammas_fall_back():
    rng = np.random.default_rng(0)
    w = bl.dirichlet(np.full((3, 4), 1e-300), rng)
    assert np.allclose(w.sum(1), 1) and np.all(np.isfinite(w))


def test_reference_plntree_generates_compositional():
    model = bl.reference_plntree(bl.synthetic_tree(), seed=0)
    from plntree.model import generate
    assert_compositional(generate(model, 100, 0))


# -- PLN ------------------------------------------------------------------------------


def test_pln_recovers_mean():
    rng = np.random.default_rng(0)
    n = 5000
    X = rng.poisson(np.exp(rng.normal(2.0, 0.5, (n, 1))))
    params = bl.pln_fit(X)
    assert abs(params.mu[0] - 2.0) < 0.1
    assert params.Sigma.shape == (1, 1) and params.Sigma[0, 0] > 0
    assert params.elbo_trace[-1] > params.elbo_trace[0]


def test_pln_elbo_matches_tree_elbo():
    # single-layer tree: the tree ELBO is deterministic and must match the flat one
    rng = np.random.default_rng(1)
    X = rng.poisson(np.exp(rng.normal(1.5, 0.4, (30, 3))))
    params = bl.pln_fit(X, bl.PlnFitConfig(iterations=200))
    flat = bl.pln_elbo(X, params.m, params.s, params.mu, params.Sigma)
    tree = TreeLayout([3], [])
    model = PlnTree(tree)
    model.set_first_layer(params.mu, params.Sigma)
    fam = MeanFieldVariational(model)
    m, s = ad.tensor(params.m)[None], ad.tensor(params.s)[None]
    draw = PosteriorDraw([m], [m], [s], [torch.zeros_like(m)], torch.zeros(1, 30, dtype=torch.float64))
    with torch.no_grad():
        T = elbo_terms(model, fam, make_batch(model, [X]), draw)
    assert np.allclose(T.per_sample().numpy(), flat, atol=1e-8)


def test_pln_generate_valid_and_deterministic():
    tree = bl.synthetic_tree()
    rng = np.random.default_rng(2)
    X = rng.poisson(5, (40, tree.n_leaves))
    params = bl.pln_fit(X, bl.PlnFitConfig(iterations=100))
    a = bl.pln_generate(tree, params, 60, 5)
    b = bl.pln_generate(tree, params, 60, 5)
    assert np.array_equal(a.layers[-1], b.layers[-1])
    assert_compositional(a)
    with pytest.raises(ValueError):
        bl.pln_generate(bl.markov_dirichlet_tree(), params, 3, 0)


def test_pln_limits():
    with pytest.raises(ValueError):
        bl.pln_fit(np.ones((1, 3)))


# -- SPiEC-Easi -----------------------------------------------------------------------


def test_spiec_constant_composition():
    tree = TreeLayout([1, 3], [[0, 0, 0]])
    X = np.tile([99, 199, 299], (20, 1))
    params = bl.spiec_fit(X, pseudocount=1.0)
    assert np.allclose(params.cov, 0, atol=1e-20)
    d = bl.spiec_generate(tree, params, 2000, 0)
    comp = d.layers[-1] / d.layers[-1].sum(1, keepdims=True)
    target = np.array([100, 200, 300]) / 600
    # only multinomial noise (plus the factorization jitter) remains
    assert np.allclose(comp.mean(0), target, atol=0.01)
    assert np.all(comp.std(0) < 3 * np.sqrt(target * (1 - target) / 597) + 0.02)


def test_spiec_totals_and_round_trip():
    tree = bl.synthetic_tree()
    rng = np.random.default_rng(3)
    X = rng.poisson(rng.gamma(2.0, 10.0, (50, tree.n_leaves)))
    params = bl.spiec_fit(X)
    d = bl.spiec_generate(tree, params, 300, 1)
    assert set(d.layers[-1].sum(1)) <= set(X.sum(1))
    assert_compositional(d)
    # inverse CLR of the fitted mean: the geometric-mean composition of the training data
    e = np.exp(params.mean)
    Y = X + 1.0
    P = Y / Y.sum(1, keepdims=True)
    g = np.exp(np.log(P).mean(0))
    assert np.allclose(e / e.sum(), g / g.sum(), atol=1e-6)
    assert np.allclose(clr(e / e.sum()), params.mean, atol=1e-12)


def test_spiec_validation():
    with pytest.raises(ValueError):
        bl.spiec_fit(np.ones((3, 2)), pseudocount=0)
    with pytest.raises(ValueError):
        bl.spiec_fit(np.ones((1, 2)))
