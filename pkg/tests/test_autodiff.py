import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from plntree import autodiff as ad


def t(x, g=False):
    return ad.tensor(x, requires_grad=g)


def test_softmax_symmetric():
    assert ad.softmax(t([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_logdet_examples():
    assert float(ad.logdet_via_cholesky(torch.eye(3, dtype=ad.DTYPE))) == 0.0
    # direct 2x2 determinant
    assert float(ad.logdet_via_cholesky(t([[2.0, 0.0], [0.0, 3.0]]))) == pytest.approx(math.log(6), abs=1e-14)
    A = t([[4.0, 1.0], [1.0, 3.0]])
    assert float(ad.logdet_via_cholesky(A)) == pytest.approx(math.log(4 * 3 - 1), abs=1e-14)


def test_dtype_is_float64():
    assert t([1, 2]).dtype == torch.float64


def test_square_gradient():
    x = t(3.0, True)
    (g,) = ad.gradients(x * x, [x])
    assert float(g) == 6.0


def test_logsumexp_gradient_is_softmax():
    z = t([1.0, 2.0, 3.0], True)
    (g,) = ad.gradients(ad.logsumexp(z), [z])
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(g.numpy(), e / e.sum(), atol=1e-14)


def test_logdet_gradient_is_inverse():
    S = t([[2.0, 0.0], [0.0, 3.0]], True)
    (g,) = ad.gradients(ad.logdet_via_cholesky(S), [S])
    assert np.allclose(g.numpy(), np.diag([0.5, 1 / 3]), atol=1e-14)


def test_non_scalar_output():
    x = t([1.0, 2.0], True)
    with pytest.raises(ad.NonScalarOutput):
        ad.gradients(x * 2, [x])


def test_unused_parameter_gets_zero():
    x, y = t(1.0, True), t([1.0, 2.0], True)
    gx, gy = ad.gradients(x * 2, [x, y])
    assert float(gx) == 2.0 and gy.tolist() == [0.0, 0.0]


def test_cholesky_reports_minor():
    A = t([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -5.0]])
    with pytest.raises(ad.CholeskyError) as e:
        ad.cholesky(A)
    assert e.value.minor == 3


def test_cholesky_jitter_rescues_singular():
    A = t(np.ones((3, 3)))
    L = ad.cholesky(A)
    assert torch.isfinite(L).all()
    assert np.allclose((L @ L.T).numpy(), np.ones((3, 3)), atol=0.2)


def test_overflow_safe_logsumexp():
    assert float(ad.logsumexp(t([1000.0, 1000.0]))) == 1000 + math.log(2)


def test_group_logsumexp_separated_groups():
    z = t([1000.0, 1000.0, -1000.0, 0.0])
    out = ad.group_logsumexp(z, torch.tensor([0, 0, 1, 1]), 2)
    assert out[0].item() == pytest.approx(1000 + math.log(2))
    assert out[1].item() == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    a = ad.softmax(t(z)).numpy()
    b = ad.softmax(t(z + c)).numpy()
    assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 128), st.integers(0, 2**31 - 1))
def test_cholesky_reconstruction(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, n))
    S = A @ A.T + n * np.eye(n)
    L = ad.cholesky(t(S)).numpy()
    assert np.linalg.norm(L @ L.T - S) / np.linalg.norm(S) < 1e-10


def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    Q = t(rng.normal(size=(4, 4)))
    b = t(rng.normal(size=4))
    f = lambda x: x @ Q @ x + b @ x + 1.0
    assert ad.grad_check(f, t(rng.normal(size=4))) < 1e-8


def test_grad_check_softmax_matmul():
    rng = np.random.default_rng(1)
    W = t(rng.normal(size=(3, 5)))
    y = t(rng.normal(size=3))
    f = lambda x: (ad.softmax(W @ x) * y).sum()
    assert ad.grad_check(f, t(rng.normal(size=5))) < 1e-6


def test_grad_check_cholesky_path():
    rng = np.random.default_rng(2)
    r = t(rng.normal(size=3))

    def f(A):
        S = A @ A.T + torch.eye(3, dtype=ad.DTYPE)
        L = ad.cholesky(S)
        return ad.logdet_from_factor(L) + ad.mahalanobis_from_factor(L, r)

    assert ad.grad_check(f, t(rng.normal(size=(3, 3)))) < 1e-6


def test_grad_check_multiple_inputs():
    f = lambda ps: (ps[0] * ps[1]).sum() + torch.exp(ps[0]).sum()
    assert ad.grad_check(f, [t([0.1, 0.2]), t([1.0, -1.0])]) < 1e-8


def test_grad_check_non_finite():
    with pytest.raises(FloatingPointError):
        ad.grad_check(lambda x: torch.log(x).sum(), t([-1.0]))
