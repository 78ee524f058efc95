"""Alpha/beta diversity, distribution distances and permutation tests.

Used to compare a reference collection of hierarchical samples with a
generated one, layer by layer.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.spatial.distance import cdist, pdist, squareform

log = logging.getLogger(__name__)

N_BINS = 50
KL_EPS = 1e-10
EMD_MAX = 512
EIG_FLOOR = 1e-12


# -- alpha diversity ------------------------------------------------------------------


def _composition(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("compositions must be nonnegative")
    tot = p.sum(axis=-1, keepdims=True)
    return np.divide(p, tot, out=np.zeros_like(p), where=tot > 0)


def shannon(p):
    """Shannon entropy ``-sum p log p`` (``0 log 0 = 0``) over the last axis.

    Inputs are renormalized; an all-zero row has entropy 0.
    """
    p = _composition(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def simpson(p):
    """Simpson index ``sum p^2``: chance that two random draws coincide."""
    p = _composition(p)
    return (p * p).sum(axis=-1)


ALPHA_INDICES = {"shannon": shannon, "simpson": simpson}


# -- beta diversity -------------------------------------------------------------------


def bray_curtis(x, y) -> float:
    """``1 - 2 sum min(x, y) / (sum x + sum y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("Bray-Curtis needs vectors of the same length")
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("Bray-Curtis needs nonnegative counts")
    tot = x.sum() + y.sum()
    if tot == 0:
        raise ValueError("Bray-Curtis is undefined for two all-zero samples")
    return float(1.0 - 2.0 * np.minimum(x, y).sum() / tot)


def bray_curtis_matrix(counts) -> np.ndarray:
    """Pairwise Bray-Curtis dissimilarities of the rows of ``counts``."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("Bray-Curtis needs nonnegative counts")
    zero = counts.sum(axis=1) == 0
    if zero.sum() > 1:
        raise ValueError("Bray-Curtis is undefined between two all-zero samples")
    D = squareform(pdist(counts, "braycurtis"))
    return np.clip(D, 0.0, 1.0)


# -- one-dimensional distances --------------------------------------------------------


def _nonempty(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("distances need nonempty samples")
    return a, b


def wasserstein_1d(a, b) -> float:
    a, b = _nonempty(a, b)
    return float(stats.wasserstein_distance(a, b))


def ks(a, b) -> float:
    """Kolmogorov-Smirnov statistic ``sup |F_a - F_b|``."""
    a, b = _nonempty(a, b)
    return float(stats.ks_2samp(a, b).statistic)


def _hists(a, b, bins):
    a, b = _nonempty(a, b)
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] / a.size
    pb = np.histogram(b, edges)[0] / b.size
    return pa, pb


def tv_hist(a, b, bins=N_BINS) -> float:
    """Total variation between histograms on a shared uniform grid."""
    pa, pb = _hists(a, b, bins)
    return float(0.5 * np.abs(pa - pb).sum())


def kl_hist(a, b, bins=N_BINS, eps=KL_EPS) -> float:
    """``KL(a || b)`` between ``eps``-smoothed histograms on a shared grid."""
    pa, pb = _hists(a, b, bins)
    pa = (pa + eps) / (1 + bins * eps)
    pb = (pb + eps) / (1 + bins * eps)
    return float(np.sum(pa * np.log(pa / pb)))


DISTANCES_1D = {"wasserstein": wasserstein_1d, "ks": ks, "tv": tv_hist, "kl": kl_hist}


# -- multivariate optimal transport ---------------------------------------------------


def emd_multivariate(A, B) -> float:
    """Exact optimal transport cost between two point clouds.

    Uniform weights and Euclidean ground cost. Equal sizes reduce to an
    assignment problem; otherwise the transportation linear program is solved.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("expected two (n, d) arrays")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("empty point cloud")
    if A.shape[0] > EMD_MAX or B.shape[0] > EMD_MAX:
        raise ValueError(f"exact transport is limited to {EMD_MAX} points per side; "
                         "subsample the inputs first")
    M = cdist(A, B)
    n, m = M.shape
    if n == m:
        r, c = optimize.linear_sum_assignment(M)
        return float(M[r, c].mean())
    # transportation problem: rows sum to 1/n, columns to 1/m
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = optimize.linprog(M.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport solver failed: {res.message}")
    return float(res.fun)


# -- permutation tests ----------------------------------------------------------------


def _check_groups(D, labels):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("dissimilarity matrix must be square")
    if not np.allclose(D, D.T, atol=1e-12):
        raise ValueError("dissimilarity matrix must be symmetric")
    labels = np.asarray(labels)
    if labels.shape[0] != D.shape[0]:
        raise ValueError("one label per row is required")
    groups, codes = np.unique(labels, return_inverse=True)
    if groups.size != 2:
        raise ValueError("the tests compare exactly two groups")
    sizes = np.bincount(codes)
    if np.any(sizes < 2):
        raise ValueError("each group needs at least 2 members")
    return D, codes


def _perm_codes(codes, n_perm, rng):
    return np.stack([rng.permutation(codes) for _ in range(n_perm)]) if n_perm else \
        np.empty((0, codes.size), dtype=codes.dtype)


def _pvalue(obs, perms):
    return (1.0 + np.sum(perms >= obs)) / (1.0 + perms.size)


def _pseudo_f(D2, codes_mat, N):
    # codes_mat: (P, N) of 0/1 group membership
    total = D2.sum() / (2.0 * N)
    within = 0.0
    for g in (0, 1):
        G = (codes_mat == g).astype(np.float64)
        ng = G.sum(axis=1)
        within = within + np.einsum("pi,ij,pj->p", G, D2, G) / (2.0 * ng)
    between = total - within
    return between / (within / (N - 2))


def permanova(D, labels, n_perm=999, seed=0):
    """PERMANOVA pseudo-F and permutation p-value for two groups.

    Returns
    -------
    (F, p)
    """
    D, codes = _check_groups(D, labels)
    N = D.shape[0]
    D2 = D * D
    rng = np.random.default_rng(seed)
    obs = _pseudo_f(D2, codes[None], N)[0]
    perms = _pseudo_f(D2, _perm_codes(codes, n_perm, rng), N) if n_perm else np.empty(0)
    return float(obs), float(_pvalue(obs, perms))


def pcoa(D, floor=EIG_FLOOR):
    """Principal coordinates of ``D`` on the axes with eigenvalue above ``floor``."""
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    A = -0.5 * D * D
    J = np.eye(n) - 1.0 / n
    Bm = J @ A @ J
    w, V = np.linalg.eigh(0.5 * (Bm + Bm.T))
    keep = w > floor
    return V[:, keep] * np.sqrt(w[keep])


def spatial_median(X, tol=1e-10, max_iter=1000):
    """Geometric median of the rows of ``X`` (Weiszfeld iterations).

    Works on stacked problems: ``X`` is (..., n, r).
    """
    X = np.asarray(X, dtype=np.float64)
    lead, (n, r) = X.shape[:-2], X.shape[-2:]
    X = X.reshape(-1, n, r)
    y = X.mean(axis=1)
    active = np.arange(X.shape[0])
    for _ in range(max_iter):
        Xa, ya = X[active], y[active]
        diff = Xa - ya[:, None, :]
        w = 1.0 / np.maximum(np.sqrt(np.einsum("pnr,pnr->pn", diff, diff)), 1e-12)
        y_new = np.einsum("pn,pnr->pr", w, Xa) / w.sum(-1)[:, None]
        # each problem stops on its own; finished ones leave the batch
        done = np.max(np.abs(y_new - ya), -1) < tol * (1.0 + np.max(np.abs(ya), -1))
        y[active] = y_new
        active = active[~done]
        if active.size == 0:
            break
    return y.reshape(lead + (r,))


def _dispersion_f(Y, codes_mat):
    # distances to group spatial medians and one-way F on them
    # permutations keep group sizes, so each group stacks into (P, n_g, r)
    P, N = codes_mat.shape
    parts = []
    for g in (0, 1):
        order = np.argsort(codes_mat != g, axis=1, kind="stable")
        ng = int((codes_mat[0] == g).sum())
        Xg = Y[order[:, :ng]]
        c = spatial_median(Xg)
        parts.append(np.linalg.norm(Xg - c[:, None, :], axis=-1))
    grand = (parts[0].sum(1) + parts[1].sum(1)) / N
    ssb = sum(z.shape[1] * (z.mean(1) - grand) ** 2 for z in parts)
    ssw = sum(((z - z.mean(1, keepdims=True)) ** 2).sum(1) for z in parts)
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(ssw > 0, ssb / (ssw / (N - 2)), np.where(ssb > 0, np.inf, 0.0))
    return F


def permdisp(D, labels, n_perm=999, seed=0):
    """PERMDISP: F test on distances to group spatial medians, by permutation.

    The samples are embedded by principal coordinates (eigenvalues below
    1e-12 dropped) and medians are recomputed for every permutation.

    Returns
    -------
    (F, p)
    """
    D, codes = _check_groups(D, labels)
    Y = pcoa(D)
    rng = np.random.default_rng(seed)
    obs = _dispersion_f(Y, codes[None])[0]
    perms = _dispersion_f(Y, _perm_codes(codes, n_perm, rng)) if n_perm else np.empty(0)
    return float(obs), float(_pvalue(obs, perms))


# -- reconstruction -------------------------------------------------------------------


def reconstruction_correlation(original, reconstructed) -> list:
    """Per-layer Pearson correlation, computed per sample then averaged.

    Parameters
    ----------
    original, reconstructed : list of (n, K_l) arrays
    """
    if len(original) != len(reconstructed):
        raise ValueError("original and reconstruction have different depths")
    out = []
    for l, (x, y) in enumerate(zip(original, reconstructed)):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"layer {l + 1}: shapes {x.shape} and {y.shape} differ")
        xc = x - x.mean(axis=1, keepdims=True)
        yc = y - y.mean(axis=1, keepdims=True)
        den = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
        ok = den > 0
        if not np.all(ok):
            warnings.warn(f"layer {l + 1}: {int((~ok).sum())} zero-variance samples skipped",
                          RuntimeWarning, stacklevel=2)
        if not np.any(ok):
            out.append(float("nan"))
            continue
        out.append(float(((xc * yc).sum(axis=1)[ok] / den[ok]).mean()))
    return out


# -- reports --------------------------------------------------------------------------


@dataclass
class DiversityReport:
    """Comparison of a generated collection against a reference one.

    ``alpha`` maps ``(index, distance, layer)`` to a value; ``wasserstein``
    maps layer to the multivariate transport distance on proportions;
    ``permanova``/``permdisp`` map layer to lists of p-values.
    """

    alpha: dict = field(default_factory=dict)
    wasserstein: dict = field(default_factory=dict)
    permanova: dict = field(default_factory=dict)
    permdisp: dict = field(default_factory=dict)
    reconstruction: list | None = None

    def to_json_dict(self):
        return {
            "alpha": [{"index": i, "distance": d, "layer": l + 1, "value": v}
                      for (i, d, l), v in sorted(self.alpha.items())],
            "wasserstein": {str(l + 1): v for l, v in sorted(self.wasserstein.items())},
            "permanova": {str(l + 1): v for l, v in sorted(self.permanova.items())},
            "permdisp": {str(l + 1): v for l, v in sorted(self.permdisp.items())},
            "reconstruction": self.reconstruction,
        }


def _props(x):
    return _composition(np.asarray(x, dtype=np.float64))


def alpha_distances(reference, generated, indices=("shannon", "simpson"),
                    distances=("wasserstein", "ks", "tv", "kl")) -> dict:
    """Distances between alpha-diversity distributions, per index and layer.

    ``reference`` and ``generated`` are lists of per-layer count arrays.
    """
    out = {}
    for l, (x, y) in enumerate(zip(reference, generated)):
        for iname in indices:
            a = ALPHA_INDICES[iname](x)
            b = ALPHA_INDICES[iname](y)
            for dname in distances:
                out[(iname, dname, l)] = DISTANCES_1D[dname](a, b)
    return out


def wasserstein_layers(reference, generated, max_points=EMD_MAX, seed=0) -> dict:
    """Multivariate transport distance between proportions at every layer.

    Collections larger than ``max_points`` are subsampled without replacement.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for l, (x, y) in enumerate(zip(reference, generated)):
        if x.shape[0] > max_points:
            x = x[rng.choice(x.shape[0], max_points, replace=False)]
        if y.shape[0] > max_points:
            y = y[rng.choice(y.shape[0], max_points, replace=False)]
        out[l] = emd_multivariate(_props(x), _props(y))
    return out


def beta_tests(reference, generated, layer, n_group=100, repetitions=50, n_perm=999, seed=0,
               tests=("permanova", "permdisp")):
    """Repeated two-group tests on Bray-Curtis dissimilarities of one layer.

    Each repetition draws ``n_group`` samples from each collection.

    Returns
    -------
    dict mapping test name to a list of ``repetitions`` p-values.
    """
    x, y = np.asarray(reference[layer]), np.asarray(generated[layer])
    if x.shape[0] < n_group or y.shape[0] < n_group:
        raise ValueError(f"need at least {n_group} samples in each collection")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    out = {t: [] for t in tests}
    labels = np.repeat([0, 1], n_group)
    for child in ss.spawn(repetitions):
        rng = np.random.default_rng(child)
        a = x[rng.choice(x.shape[0], n_group, replace=False)]
        b = y[rng.choice(y.shape[0], n_group, replace=False)]
        keep_a = a.sum(axis=1) > 0
        keep_b = b.sum(axis=1) > 0
        counts = np.vstack([a[keep_a], b[keep_b]])
        lab = np.concatenate([labels[:n_group][keep_a], labels[n_group:][keep_b]])
        D = bray_curtis_matrix(counts)
        s = int(rng.integers(2 ** 31))
        if "permanova" in out:
            out["permanova"].append(permanova(D, lab, n_perm, s)[1])
        if "permdisp" in out:
            out["permdisp"].append(permdisp(D, lab, n_perm, s)[1])
    return out


def diversity_report(reference, generated, beta=True, n_group=100, repetitions=50,
                     n_perm=999, seed=0, wasserstein=True) -> DiversityReport:
    rep = DiversityReport()
    rep.alpha = alpha_distances(reference, generated)
    if wasserstein:
        rep.wasserstein = wasserstein_layers(reference, generated, seed=seed)
    if beta:
        for l in range(len(reference)):
            res = beta_tests(reference, generated, l, n_group, repetitions, n_perm, seed + l)
            rep.permanova[l] = res["permanova"]
            rep.permdisp[l] = res["permdisp"]
    return rep
