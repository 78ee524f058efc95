import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import optimize, stats
from scipy.spatial.distance import cdist

from plntree import diversity as dv


def test_alpha_examples():
    assert dv.shannon(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-15)
    assert dv.simpson(np.full(4, 0.25)) == pytest.approx(0.25)
    assert dv.shannon([0, 1, 0]) == 0 and dv.simpson([0, 1, 0]) == 1
    p = [0.5, 0.25, 0.25]
    assert dv.shannon(p) == pytest.approx(1.5 * math.log(2), abs=1e-15)
    assert dv.shannon(p) == pytest.approx(1.0397, abs=1e-4)
    assert dv.simpson(p) == pytest.approx(0.375)
    with pytest.raises(ValueError):
        dv.shannon([0.5, -0.5, 1.0])
    # counts are renormalized; empty rows score 0
    assert dv.shannon([[2, 2, 0], [0, 0, 0]]).tolist() == pytest.approx([math.log(2), 0.0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 100)), st.integers(0, 5))
def test_alpha_bounds_and_padding(p, pad):
    if p.sum() == 0:
        p[0] = 1
    K = p.size
    H, S = dv.shannon(p), dv.simpson(p)
    assert -1e-12 <= H <= math.log(K) + 1e-12
    assert 1 / K - 1e-12 <= S <= 1 + 1e-12
    q = np.concatenate([p, np.zeros(pad)])
    assert dv.shannon(q) == pytest.approx(H, abs=1e-12)
    assert dv.simpson(q) == pytest.approx(S, abs=1e-12)


def test_bray_curtis_examples():
    assert dv.bray_curtis([3, 1, 0], [3, 1, 0]) == 0
    assert dv.bray_curtis([3, 0], [0, 5]) == 1
    assert dv.bray_curtis([2, 2], [2, 0]) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        dv.bray_curtis([0, 0], [0, 0])
    with pytest.raises(ValueError):
        dv.bray_curtis_matrix([[0, 0], [0, 0], [1, 2]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bray_curtis_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 20, (8, 5))
    X[0] += 1
    D = dv.bray_curtis_matrix(X)
    assert np.array_equal(D, D.T) and np.all(np.diag(D) == 0)
    assert np.all((D >= 0) & (D <= 1))
    i, j = 2, 5
    if X[i].sum() + X[j].sum() > 0:
        assert D[i, j] == pytest.approx(dv.bray_curtis(X[i], X[j]), abs=1e-12)


def test_one_dimensional_distances():
    rng = np.random.default_rng(0)
    a = rng.normal(size=300)
    assert dv.wasserstein_1d(a, a) == 0 and dv.ks(a, a) == 0 and dv.tv_hist(a, a) == 0
    assert dv.kl_hist(a, a) == pytest.approx(0, abs=50 * 1e-10)
    assert dv.wasserstein_1d([0], [1]) == 1 and dv.ks([0], [1]) == 1
    N = 25
    assert dv.wasserstein_1d(np.zeros(2 * N), np.r_[np.zeros(N), np.ones(N)]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dv.ks([], [1.0])
    # disjoint supports saturate TV
    assert dv.tv_hist([0, 0.1], [5, 5.2]) == pytest.approx(1.0)
    assert dv.kl_hist([0, 0.1], [5, 5.2]) > 10


def test_sorted_coupling_equal_sizes():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=40), rng.exponential(size=40)
    assert dv.wasserstein_1d(a, b) == pytest.approx(np.abs(np.sort(a) - np.sort(b)).mean(), abs=1e-12)


def test_emd_examples():
    rng = np.random.default_rng(2)
    A = rng.random((6, 3))
    assert dv.emd_multivariate(A, A) == pytest.approx(0, abs=1e-15)
    x, y = np.array([[0.2, 0.8]]), np.array([[0.6, 0.4]])
    assert dv.emd_multivariate(x, y) == pytest.approx(np.linalg.norm(x - y), abs=1e-15)
    with pytest.raises(ValueError):
        dv.emd_multivariate(np.zeros((513, 2)), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_emd_brute_force(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.random((3, 4)), rng.random((3, 4))
    M = cdist(A, B)
    brute = min(M[range(3), p].mean() for p in itertools.permutations(range(3)))
    assert dv.emd_multivariate(A, B) == pytest.approx(brute, abs=1e-10)


@pytest.mark.parametrize("n,m", [(5, 5), (4, 7), (9, 3)])
def test_emd_matches_1d(n, m):
    rng = np.random.default_rng(n * m)
    a, b = rng.normal(size=n), rng.normal(1, 2, size=m)
    assert dv.emd_multivariate(a[:, None], b[:, None]) == pytest.approx(dv.wasserstein_1d(a, b), abs=1e-10)


# -- permutation tests ----------------------------------------------------------------


def pseudo_f_oracle(D, labels):
    """Sum-of-squares form: SS_T = sum_{i<j} d^2 / N, SS_W per group."""
    N = len(labels)
    iu = np.triu_indices(N, 1)
    sst = (D[iu] ** 2).sum() / N
    ssw = 0.0
    for g in np.unique(labels):
        idx = np.flatnonzero(labels == g)
        sub = D[np.ix_(idx, idx)]
        ssw += (sub[np.triu_indices(idx.size, 1)] ** 2).sum() / idx.size
    return ((sst - ssw) / 1) / (ssw / (N - 2))


def permdisp_oracle(D, labels):
    """Classical MDS, numerically minimized medians, one-way ANOVA."""
    n = D.shape[0]
    J = np.eye(n) - 1 / n
    w, V = np.linalg.eigh(-0.5 * J @ (D ** 2) @ J)
    Y = V[:, w > 1e-12] * np.sqrt(w[w > 1e-12])
    disp = []
    for g in np.unique(labels):
        Xg = Y[labels == g]
        res = optimize.minimize(lambda c: np.linalg.norm(Xg - c, axis=1).sum(), Xg.mean(0),
                                method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        disp.append(np.linalg.norm(Xg - res.x, axis=1))
    return stats.f_oneway(*disp).statistic


def cloud_D(rng, n1, n2, shift=0.0, scale2=1.0, dim=3):
    A = rng.normal(size=(n1, dim))
    B = rng.normal(size=(n2, dim)) * scale2 + shift
    D = cdist(np.vstack([A, B]), np.vstack([A, B]))
    return D / D.max(), np.repeat([0, 1], [n1, n2])


@pytest.mark.parametrize("seed", range(3))
def test_pseudo_f_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 30, (14, 6)) + 1
    D = dv.bray_curtis_matrix(X)
    labels = np.array([0] * 6 + [1] * 8)
    F, _ = dv.permanova(D, labels, n_perm=0)
    assert F == pytest.approx(pseudo_f_oracle(D, labels), rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_permdisp_f_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    D, labels = cloud_D(rng, 7, 9, scale2=2.0, dim=2)
    F, _ = dv.permdisp(D, labels, n_perm=0)
    assert F == pytest.approx(permdisp_oracle(D, labels), rel=1e-5)


def test_permanova_null_calibration():
    rng = np.random.default_rng(0)
    ps = []
    for r in range(200):
        X = rng.integers(0, 20, (20, 5)) + 1
        ps.append(dv.permanova(dv.bray_curtis_matrix(X), np.repeat([0, 1], 10), 199, seed=r)[1])
    assert stats.kstest(ps, "uniform").pvalue > 0.01


def test_permanova_separated_clouds():
    rng = np.random.default_rng(1)
    D, labels = cloud_D(rng, 10, 10, shift=100.0)
    ps = []
    for seed in range(5):
        _, p = dv.permanova(D, labels, n_perm=999, seed=seed)
        # only a relabeling reproducing the partition (identity or full swap) ties the
        # observed statistic; it occurs with probability ~1% over 999 draws
        perms = dv._perm_codes(labels, 999, np.random.default_rng(seed))
        same = np.all(perms == labels, 1) | np.all(perms == 1 - labels, 1)
        assert p == (1 + same.sum()) / 1000
        ps.append(p)
    assert ps.count(1 / 1000) >= 4


def test_permdisp_mirrored_clouds():
    passes = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(15, 3))
        P = np.vstack([A, -A + 0.5])
        D = cdist(P, P)
        _, p = dv.permdisp(D / D.max(), np.repeat([0, 1], 15), n_perm=199, seed=seed)
        passes += p > 0.05
    assert passes >= 18


def test_permdisp_detects_spread():
    rng = np.random.default_rng(3)
    D, labels = cloud_D(rng, 30, 30, scale2=4.0)
    assert dv.permdisp(D, labels, 199, seed=0)[1] < 0.01


@pytest.mark.parametrize("test", [dv.permanova, dv.permdisp])
def test_label_swap_symmetry(test):
    rng = np.random.default_rng(4)
    D, labels = cloud_D(rng, 8, 11, shift=0.3, scale2=1.5)
    a = test(D, labels, 199, seed=7)
    b = test(D, 1 - labels, 199, seed=7)
    assert a[0] == pytest.approx(b[0], rel=1e-12) and a[1] == b[1]


def test_group_checks():
    D = np.zeros((4, 4))
    with pytest.raises(ValueError):
        dv.permanova(D, [0, 0, 0, 1])
    with pytest.raises(ValueError):
        dv.permanova(D, [0, 1, 2, 2])
    A = np.ones((4, 4)) - np.eye(4)
    A[0, 1] = 0.5
    with pytest.raises(ValueError):
        dv.permdisp(A, [0, 0, 1, 1])


# -- reconstruction and reports -------------------------------------------------------


def test_reconstruction_correlation():
    rng = np.random.default_rng(0)
    X = [rng.poisson(10, (20, 5)), rng.poisson(10, (20, 9))]
    assert dv.reconstruction_correlation(X, X) == pytest.approx([1.0, 1.0])
    neg = [2 * x.mean(1, keepdims=True) - x for x in X]
    assert dv.reconstruction_correlation(X, neg) == pytest.approx([-1.0, -1.0])
    A, B = rng.normal(size=(200, 50)), rng.normal(size=(200, 50))
    assert abs(dv.reconstruction_correlation([A], [B])[0]) < 0.3


def test_reconstruction_skips_constant_samples():
    X = [np.array([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])]
    with pytest.warns(RuntimeWarning):
        r = dv.reconstruction_correlation(X, X)
    assert r == [1.0]


def test_report_shapes():
    rng = np.random.default_rng(0)
    ref = [rng.poisson(20, (60, 2)), rng.poisson(10, (60, 4))]
    gen = [rng.poisson(20, (60, 2)), rng.poisson(10, (60, 4))]
    rep = dv.diversity_report(ref, gen, n_group=20, repetitions=3, n_perm=49, seed=0)
    assert len(rep.alpha) == 2 * 2 * 4
    assert all(v >= 0 for v in rep.alpha.values())
    assert all(len(v) == 3 and all(0 < p <= 1 for p in v) for v in rep.permanova.values())
    doc = rep.to_json_dict()
    assert set(doc["wasserstein"]) == {"1", "2"} and doc["alpha"][0]["layer"] in (1, 2)


def test_beta_tests_deterministic():
    rng = np.random.default_rng(1)
    ref = [rng.poisson(5, (40, 3))]
    gen = [rng.poisson(5, (40, 3))]
    a = dv.beta_tests(ref, gen, 0, n_group=15, repetitions=4, n_perm=49, seed=3)
    b = dv.beta_tests(ref, gen, 0, n_group=15, repetitions=4, n_perm=49, seed=3)
    assert a == b and len(a["permdisp"]) == 4
    with pytest.raises(ValueError):
        dv.beta_tests(ref, gen, 0, n_group=50)
