"""Markov-Dirichlet generator and the flat (leaf-only) PLN / SPiEC-Easi baselines.

The baselines model the leaf layer only; their samples are lifted to the
full tree by summing children, so every output is compositional.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.special import gammaln

from . import autodiff as ad
from .features import clr
from .hierarchy import HierarchicalDataset, TreeLayout, lift_leaf_array
from .model import ModelArch, PlnTree, seed_sequence

log = logging.getLogger(__name__)

MAX_PLN_SAMPLES = 100_000
ALPHA_FLOOR = 1e-6


# -- synthetic trees and reference models ---------------------------------------------


def synthetic_tree() -> TreeLayout:
    """Three-layer tree (3, 8, 16) used for PLN-Tree generated benchmarks."""
    return TreeLayout([3, 8, 16], [[0, 0, 0, 1, 1, 2, 2, 2],
                                   [0, 0, 1, 1, 2, 2, 2, 3, 4, 4, 5, 5, 6, 6, 7, 7]])


def markov_dirichlet_tree() -> TreeLayout:
    """Three-layer tree (4, 10, 20) with one only-child, for Markov-Dirichlet data."""
    return TreeLayout([4, 10, 20], [[0, 0, 1, 1, 1, 2, 2, 3, 3, 3],
                                    [0, 0, 1, 1, 2, 2, 2, 3, 4, 4, 5, 5, 6, 6, 6, 7, 8, 8, 9, 9]])


def reference_plntree(tree: TreeLayout, seed=0, mu1=None, sigma1=None, arch=None) -> PlnTree:
    """PLN-Tree with random transition networks and a chosen root layer.

    Defaults: root log-means ``log 200`` with covariance ``0.3 I + 0.1``
    (positively correlated roots).
    """
    model = PlnTree(tree, arch or ModelArch(), seed)
    d0 = model.dims[0]
    mu1 = np.full(d0, math.log(200.0)) if mu1 is None else np.asarray(mu1, dtype=np.float64)
    sigma1 = 0.3 * np.eye(d0) + 0.1 if sigma1 is None else np.asarray(sigma1, dtype=np.float64)
    model.set_first_layer(mu1, sigma1)
    return model


# -- Markov-Dirichlet -----------------------------------------------------------------


@dataclass
class MarkovDirichletConfig:
    """Settings of the graph / log-normal / Dirichlet-multinomial generator.

    ``mu`` defaults to zeros. ``effort`` is ``"fixed"`` (``N`` counts per
    sample) or ``"negative-binomial"`` with ``nb_r``, ``nb_p``.
    """

    tree: TreeLayout
    edge_prob: float = 0.3
    graph: str = "erdos-renyi"
    v: float = 0.3
    u: float = 0.1
    mu: list | None = None
    effort: str = "fixed"
    N: int = 20000
    nb_r: float | None = None
    nb_p: float | None = None
    alpha_scale: float = 1.0
    net_seed: int = 0

    def __post_init__(self):
        if self.graph != "erdos-renyi":
            raise ValueError(f"graph model {self.graph!r} is not supported (use 'erdos-renyi')")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must lie in [0, 1]")
        if self.v <= 0 or self.u <= 0:
            raise ValueError("v and u must be positive")
        if self.effort == "fixed":
            if int(self.N) < 1:
                raise ValueError("sampling effort N must be at least 1")
        elif self.effort == "negative-binomial":
            if self.nb_r is None or self.nb_p is None or self.nb_r <= 0 or not 0 < self.nb_p <= 1:
                raise ValueError("negative-binomial effort needs nb_r > 0 and 0 < nb_p <= 1")
        else:
            raise ValueError(f"unknown effort kind {self.effort!r}")
        if self.alpha_scale <= 0:
            raise ValueError("alpha_scale must be positive")
        K1 = self.tree.layer_sizes[0]
        if self.mu is not None and len(self.mu) != K1:
            raise ValueError(f"mu must have {K1} entries")

    def to_dict(self):
        d = asdict(self)
        d["tree"] = self.tree.to_dict()
        return d


@dataclass
class _MarkovDirichletParts:
    G: np.ndarray
    Omega: np.ndarray
    mu: np.ndarray
    nets: dict = field(default_factory=dict)


def adjacency(K: int, p: float, rng) -> np.ndarray:
    """Symmetric Erdos-Renyi adjacency matrix with empty diagonal."""
    upper = np.triu(rng.random((K, K)) < p, k=1)
    return (upper | upper.T).astype(np.float64)


def precision_from_graph(G, v: float, u: float) -> np.ndarray:
    """``v G + diag(|min eig(v G)| + u)``: positive definite with smallest eigenvalue ``u``."""
    vG = v * np.asarray(G, dtype=np.float64)
    try:
        lo = np.linalg.eigvalsh(vG).min()
    except np.linalg.LinAlgError as e:
        raise FloatingPointError(f"eigen-decomposition of the graph failed: {e}") from e
    return vG + np.diag(np.full(vG.shape[0], abs(lo) + u))


def _build(cfg: MarkovDirichletConfig) -> _MarkovDirichletParts:
    tree = cfg.tree
    rng = np.random.default_rng(cfg.net_seed)
    K1 = tree.layer_sizes[0]
    G = adjacency(K1, cfg.edge_prob, rng)
    Omega = precision_from_graph(G, cfg.v, cfg.u)
    mu = np.zeros(K1) if cfg.mu is None else np.asarray(cfg.mu, dtype=np.float64)
    nets = {}
    for l in range(tree.n_layers - 1):
        Kl = tree.layer_sizes[l]
        for k, ch in enumerate(tree.sibling_groups(l + 1)):
            if ch.size > 1:
                W = rng.standard_normal((ch.size, Kl))
                b = rng.standard_normal(ch.size)
                nets[(l, k)] = (W, b)
    return _MarkovDirichletParts(G, Omega, mu, nets)


def _softplus(x):
    return np.logaddexp(0.0, x)


def concentration(cfg, parts, l, k, x_layer):
    """Dirichlet parameters of the children of node ``k`` given layer counts.

    The input is the layer's composition; output is floored at 1e-6.
    """
    W, b = parts.nets[(l, k)]
    x = np.asarray(x_layer, dtype=np.float64)
    tot = x.sum(axis=-1, keepdims=True)
    p = np.divide(x, tot, out=np.zeros_like(x), where=tot > 0)
    a = cfg.alpha_scale * _softplus(p @ W.T + b)
    return np.maximum(a, ALPHA_FLOOR)


def dirichlet(alpha, rng):
    """Row-wise Dirichlet draws through normalized Gamma variables."""
    g = rng.standard_gamma(alpha)
    tot = g.sum(axis=-1, keepdims=True)
    bad = tot[..., 0] <= 0
    if np.any(bad):
        # every Gamma underflowed: fall back to the mean of the Dirichlet
        g[bad] = alpha[bad]
        tot = g.sum(axis=-1, keepdims=True)
    return g / tot


def markov_dirichlet_sample(cfg: MarkovDirichletConfig, n: int, seed) -> HierarchicalDataset:
    """Sample ``n`` hierarchical count vectors from the Markov-Dirichlet protocol.

    ``log a ~ N(mu, Omega^-1)`` with ``Omega`` the graph precision,
    ``pi = softmax(a)``, roots ``~ Multinomial(N, pi)``, then every node
    splits its count by a Dirichlet-multinomial draw whose parameters depend
    on the whole parent layer.
    """
    if n < 1:
        raise ValueError("n must be positive")
    tree = cfg.tree
    parts = _build(cfg)
    ss = seed_sequence(seed)
    s_lat, s_eff, s_cnt = ss.spawn(3)
    rng = np.random.default_rng(s_lat)
    cov = np.linalg.inv(parts.Omega)
    cov = 0.5 * (cov + cov.T)
    log_a = rng.multivariate_normal(parts.mu, cov, size=n, method="cholesky")
    a = np.exp(log_a)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    pi = e / e.sum(axis=1, keepdims=True)
    rng_e = np.random.default_rng(s_eff)
    if cfg.effort == "fixed":
        N = np.full(n, int(cfg.N), dtype=np.int64)
    else:
        N = np.maximum(rng_e.negative_binomial(cfg.nb_r, cfg.nb_p, size=n), 1)
    rng_c = np.random.default_rng(s_cnt)
    X = [rng_c.multinomial(N, pi)]
    for l in range(tree.n_layers - 1):
        x = np.zeros((n, tree.layer_sizes[l + 1]), dtype=np.int64)
        for k, ch in enumerate(tree.sibling_groups(l + 1)):
            if ch.size == 1:
                x[:, ch[0]] = X[-1][:, k]
                continue
            w = dirichlet(concentration(cfg, parts, l, k, X[-1]), rng_c)
            x[:, ch] = rng_c.multinomial(X[-1][:, k], w)
        X.append(x)
    return HierarchicalDataset(tree, X)


# -- PLN baseline ----------------------------------------------------------------------


@dataclass
class PlnBaselineParams:
    """Flat PLN on the leaves plus the per-sample variational parameters."""

    mu: np.ndarray
    Sigma: np.ndarray
    m: np.ndarray
    s: np.ndarray
    elbo_trace: list = field(default_factory=list)


@dataclass
class PlnFitConfig:
    iterations: int = 2000
    lr: float = 0.05
    tol: float = 1e-7
    seed: int = 0


def pln_elbo(X, m, s, mu, Sigma) -> np.ndarray:
    """Per-sample PLN evidence lower bound for diagonal Gaussian posteriors.

    Parameters
    ----------
    X : (n, K) counts
    m, s : (n, K) variational means and variances
    mu : (K,)
    Sigma : (K, K)
    """
    X = np.asarray(X, dtype=np.float64)
    K = X.shape[1]
    Lc = np.linalg.cholesky(Sigma)
    Sinv = np.linalg.inv(Sigma)
    r = m - mu
    quad = np.einsum("ij,jk,ik->i", r, Sinv, r)
    tr = s @ np.diag(Sinv)
    pois = (X * m - np.exp(m + 0.5 * s) - gammaln(X + 1)).sum(1)
    logdet = 2.0 * np.log(np.diag(Lc)).sum()
    return pois - 0.5 * (logdet + quad + tr) + 0.5 * np.log(s).sum(1) + 0.5 * K


def _pln_closed_form(m, s):
    mu = m.mean(0)
    r = m - mu
    Sigma = r.T @ r / m.shape[0] + np.diag(s.mean(0))
    return mu, Sigma


def pln_fit(leaves, config: PlnFitConfig | None = None) -> PlnBaselineParams:
    """Variational EM for the flat PLN model on leaf counts.

    Gradient steps on the per-sample ``(m_i, log s_i)`` alternate with the
    closed-form ``(mu, Sigma)`` maximizers.
    """
    config = config or PlnFitConfig()
    X = np.asarray(leaves, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected an (n, K) leaf matrix")
    n, K = X.shape
    if n < 2:
        raise ValueError("PLN fitting needs at least 2 samples")
    if n > MAX_PLN_SAMPLES:
        raise ValueError(f"per-sample variational parameters limit n to {MAX_PLN_SAMPLES}")
    Xt = ad.tensor(X)
    m = ad.tensor(np.log(np.maximum(X, 1.0)), requires_grad=True)
    log_s = ad.tensor(np.full((n, K), math.log(0.1)), requires_grad=True)
    lg = torch.lgamma(Xt + 1).sum()
    opt = torch.optim.Adam([m, log_s], lr=config.lr)
    trace = []
    prev = -np.inf
    for it in range(config.iterations):
        with torch.no_grad():
            s = log_s.exp()
            mu = m.mean(0)
            r = m - mu
            Sigma = r.T @ r / n + torch.diag(s.mean(0))
            L = ad.cholesky(Sigma)
            Sinv = torch.cholesky_inverse(L)
            logdet = 2.0 * torch.log(torch.diag(L)).sum()
        s = log_s.exp()
        r = m - mu
        quad = ((r @ Sinv) * r).sum()
        tr = (s * torch.diag(Sinv)).sum()
        pois = (Xt * m - torch.exp(m + 0.5 * s)).sum() - lg
        elbo = pois - 0.5 * (n * logdet + quad + tr) + 0.5 * log_s.sum() + 0.5 * n * K
        opt.zero_grad()
        (-elbo / n).backward()
        opt.step()
        val = elbo.item() / n
        trace.append(val)
        if not math.isfinite(val):
            raise FloatingPointError(f"PLN fit diverged at iteration {it}")
        if abs(val - prev) < config.tol * (1.0 + abs(val)):
            break
        prev = val
    m_np = m.detach().numpy().copy()
    s_np = log_s.detach().exp().numpy().copy()
    mu_np, Sigma_np = _pln_closed_form(m_np, s_np)
    return PlnBaselineParams(mu_np, Sigma_np, m_np, s_np, trace)


def _mvn_draws(mu, Sigma, n, rng):
    Lc = ad.cholesky(ad.tensor(Sigma)).numpy()
    return mu + rng.standard_normal((n, mu.size)) @ Lc.T


def pln_generate(tree: TreeLayout, params: PlnBaselineParams, n: int, seed) -> HierarchicalDataset:
    """``Z ~ N(mu, Sigma)``, leaves ``~ Poisson(exp Z)``, lifted to the tree."""
    if params.mu.size != tree.n_leaves:
        raise ValueError("parameters and tree have different leaf counts")
    rng = np.random.default_rng(seed)
    Z = _mvn_draws(params.mu, params.Sigma, n, rng)
    leaves = rng.poisson(np.exp(np.minimum(Z, 25.0)))
    return HierarchicalDataset(tree, lift_leaf_array(tree, leaves), validate=False)


# -- SPiEC-Easi-style baseline ---------------------------------------------------------


@dataclass
class SpiecEasiParams:
    mean: np.ndarray
    cov: np.ndarray
    totals: np.ndarray
    pseudocount: float = 1.0


def spiec_fit(leaves, pseudocount: float = 1.0) -> SpiecEasiParams:
    """Gaussian fit to the CLR of pseudocounted leaf compositions (no sparsity)."""
    X = np.asarray(leaves, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("expected an (n, K) leaf matrix with n >= 2")
    if pseudocount <= 0:
        raise ValueError("pseudocount must be positive")
    Y = X + pseudocount
    C = clr(Y / Y.sum(1, keepdims=True))
    mean = C.mean(0)
    r = C - mean
    cov = r.T @ r / (X.shape[0] - 1)
    return SpiecEasiParams(mean, cov, X.sum(1).astype(np.int64), pseudocount)


def spiec_generate(tree: TreeLayout, params: SpiecEasiParams, n: int, seed) -> HierarchicalDataset:
    """Gaussian CLR draw, softmax back to the simplex, multinomial with a resampled total."""
    if params.mean.size != tree.n_leaves:
        raise ValueError("parameters and tree have different leaf counts")
    rng = np.random.default_rng(seed)
    # the CLR covariance is singular (rows sum to 0); jitter inside the factorization
    Z = _mvn_draws(params.mean, params.cov, n, rng)
    e = np.exp(Z - Z.max(1, keepdims=True))
    pi = e / e.sum(1, keepdims=True)
    totals = rng.choice(params.totals, size=n, replace=True)
    leaves = rng.multinomial(totals, pi)
    return HierarchicalDataset(tree, lift_leaf_array(tree, leaves), validate=False)
