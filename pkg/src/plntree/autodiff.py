"""Dense float64 tensor operations with reverse-mode gradients.

Tensors and the recording tape are PyTorch's: every tensor created with
``requires_grad=True`` registers as a parameter and each primitive applied to
it is recorded for the backward pass. This module pins the dtype, provides the
operations whose numerical policy matters for the ELBO (jittered Cholesky,
log-determinants, grouped log-sum-exp) and a finite-difference gradient check.

The primitive set used across the package is: add, sub, mul, matmul, exp, log,
softplus, sigmoid, tanh, softmax, logsumexp, sum, mean, maximum/clamp,
concatenate, slicing, outer products, diagonal extraction/construction, trace,
Cholesky, triangular solves and log-determinants through Cholesky.
"""

from __future__ import annotations

import math

import numpy as np
import torch

DTYPE = torch.float64

JITTER_START = 1e-4
JITTER_MAX = 1e-1


class CholeskyError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter escalation.

    Attributes
    ----------
    minor : int
        1-based order of the leading minor that is not positive definite.
    jitter : float
        Largest jitter tried.
    """

    def __init__(self, minor, jitter):
        self.minor = int(minor)
        self.jitter = jitter
        super().__init__(
            f"matrix is not positive definite (leading minor {self.minor}) "
            f"after adding jitter up to {jitter:g}"
        )


class NonScalarOutput(ValueError):
    pass


def tensor(x, requires_grad=False) -> torch.Tensor:
    """Float64 tensor copy of ``x``."""
    if torch.is_tensor(x):
        t = x.detach().to(DTYPE).clone()
    else:
        t = torch.from_numpy(np.array(x, dtype=np.float64))
    if requires_grad:
        t.requires_grad_(True)
    return t


def softmax(z: torch.Tensor) -> torch.Tensor:
    return torch.softmax(z, dim=-1)


def logsumexp(z: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(z, dim=-1)


def outer(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched outer product over the last axis."""
    return a.unsqueeze(-1) * b.unsqueeze(-2)


def trace(a: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(a, dim1=-2, dim2=-1).sum(-1)


def diag(v: torch.Tensor) -> torch.Tensor:
    return torch.diag_embed(v)


def diag_part(a: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(a, dim1=-2, dim2=-1)


def symmetrize(a: torch.Tensor) -> torch.Tensor:
    return 0.5 * (a + a.transpose(-1, -2))


def cholesky(a: torch.Tensor, jitter: float = JITTER_START, max_jitter: float = JITTER_MAX):
    """Lower Cholesky factor of a (batch of) symmetric positive definite matrix.

    The input is symmetrized first. When the plain factorization fails, a
    multiple of the identity starting at ``jitter`` is added and doubled until
    it succeeds or exceeds ``max_jitter``.

    Raises
    ------
    CholeskyError
        With the index of the failing leading minor.
    """
    a = symmetrize(a)
    L, info = torch.linalg.cholesky_ex(a)
    if not torch.any(info > 0):
        return L
    eye = torch.eye(a.shape[-1], dtype=a.dtype)
    lam = jitter
    while lam <= max_jitter:
        L, info = torch.linalg.cholesky_ex(a + lam * eye)
        if not torch.any(info > 0):
            return L
        lam *= 2.0
    raise CholeskyError(int(info.max()), lam / 2.0)


def triangular_solve(L: torch.Tensor, b: torch.Tensor, lower: bool = True) -> torch.Tensor:
    """Solve ``L x = b`` for triangular ``L``; ``b`` is a matrix (…, n, k)."""
    return torch.linalg.solve_triangular(L, b, upper=not lower)


def logdet_via_cholesky(a: torch.Tensor, **kw) -> torch.Tensor:
    """``log|a| = 2 sum(log diag(chol(a)))``."""
    L = cholesky(a, **kw)
    return 2.0 * torch.log(diag_part(L)).sum(-1)


def logdet_from_factor(L: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(diag_part(L)).sum(-1)


def mahalanobis_from_factor(L: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """``r^T (L L^T)^{-1} r`` for batched residuals ``r`` (…, n)."""
    y = triangular_solve(L, r.unsqueeze(-1)).squeeze(-1)
    return (y * y).sum(-1)


def mvn_logpdf_from_factor(x, mean, L):
    """Gaussian log-density with covariance ``L L^T``."""
    d = x.shape[-1]
    return -0.5 * (d * math.log(2 * math.pi) + logdet_from_factor(L)
                   + mahalanobis_from_factor(L, x - mean))


def group_logsumexp(z: torch.Tensor, groups: torch.Tensor, n_groups: int) -> torch.Tensor:
    """Log-sum-exp of ``z`` (…, n) within groups given by integer labels.

    Returns a tensor of shape (…, n_groups). Each group is shifted by its own
    maximum so arbitrarily separated groups stay finite.
    """
    shape = z.shape[:-1] + (n_groups,)
    idx = groups.expand(z.shape)
    zmax = torch.full(shape, -math.inf, dtype=z.dtype).scatter_reduce(
        -1, idx, z.detach(), reduce="amax", include_self=True
    )
    shifted = torch.exp(z - zmax.gather(-1, idx))
    total = torch.zeros(shape, dtype=z.dtype).scatter_add(-1, idx, shifted)
    return torch.log(total) + zmax


def gradients(output: torch.Tensor, params) -> list:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. ``params``.

    Parameters that ``output`` does not depend on get a zero gradient.
    """
    if output.numel() != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {tuple(output.shape)}")
    params = list(params)
    grads = torch.autograd.grad(output, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def grad_check(f, point, eps: float = 1e-5, floor: float = 1e-3) -> float:
    """Worst relative discrepancy between reverse-mode and central differences.

    Parameters
    ----------
    f : callable
        Maps a tensor (or a list of tensors) to a scalar tensor. It must be
        deterministic: any randomness has to be frozen by the caller.
    point : tensor or list of tensors
        Where to evaluate the gradient. Not modified.
    eps : float
        Finite-difference step.
    floor : float
        Relative errors are taken against ``max(|g_ad|, |g_fd|, floor * ||g||_inf)``
        so that coordinates with a vanishing gradient do not dominate.

    Raises
    ------
    FloatingPointError
        ``f`` is not finite at a probe point.
    """
    single = torch.is_tensor(point)
    pts = [point] if single else list(point)
    pts = [p.detach().clone().to(DTYPE).requires_grad_(True) for p in pts]

    def call(args):
        out = f(args[0] if single else args)
        if out.numel() != 1:
            raise NonScalarOutput("grad_check needs a scalar function")
        return out

    out = call(pts)
    if not torch.isfinite(out):
        raise FloatingPointError("function is not finite at the evaluation point")
    ad = [g.detach() for g in gradients(out, pts)]

    fd = []
    with torch.no_grad():
        base = [p.detach().clone() for p in pts]
        for j, p in enumerate(base):
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = call(base).item()
                flat[i] = orig - eps
                down = call(base).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError("function is not finite at a probe point")
                g.view(-1)[i] = (up - down) / (2 * eps)
            fd.append(g)

    a = torch.cat([g.reshape(-1) for g in ad])
    b = torch.cat([g.reshape(-1) for g in fd])
    if a.numel() == 0:
        return 0.0
    scale = max(float(a.abs().max()), float(b.abs().max()))
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()),
                          torch.full_like(a, max(floor * scale, 1e-300)))
    return float(((a - b).abs() / denom).max())
