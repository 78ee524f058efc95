"""Variational families for the PLN-Tree posterior.

Two families are provided:

* :class:`BackwardVariational`, a Gaussian Markov chain running from the
  leaves to the roots, ``q(Z^L | X^{1:L}) prod_l q(Z^l | Z^{l+1}, X^{1:l})``,
  with the count prefix ``X^{1:l}`` summarized by a recurrent embedder and
  ``X^l`` fed again to the layer heads (residual connection);
* :class:`MeanFieldVariational`, independent Gaussians ``q(Z^l | X^l)``.

Both produce diagonal covariances on the free coordinates of each layer, with
means and variances squashed into fixed ranges by tempered sigmoids.
Counts enter every network as ``log1p(X)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE
from .neural import (MEAN_BOUNDS, VAR_BOUNDS, GruSpec, Mlp, MlpSpec, RecurrentEmbedder,
                     TemperedSigmoid, make_generator)

INIT_VARIANCE = 0.1


@dataclass
class BackwardArch:
    """Backward family architecture.

    ``head_layers`` counts the affine layers of each mean/variance head;
    heads have hidden width equal to their input size. Defaults follow the
    selected synthetic configuration (GRU 32 x 3, embedding 120).
    """

    embedding_dim: int = 120
    hidden_size: int = 32
    n_stacked_layers: int = 3
    head_layers: int = 2
    cell: str = "gru"
    strongly_amortized: bool = False
    activation: str = "tanh"
    slope: float | None = None

    def to_dict(self):
        return {"kind": "backward", **asdict(self)}


@dataclass
class MeanFieldArch:
    head_layers: int = 2
    activation: str = "tanh"
    slope: float | None = None

    def to_dict(self):
        return {"kind": "mean-field", **asdict(self)}


def arch_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "backward":
        return BackwardArch(**d)
    if kind == "mean-field":
        return MeanFieldArch(**d)
    raise ValueError(f"unknown variational family {kind!r}")


def _bounds(slope):
    mk = (lambda lo, hi: TemperedSigmoid(lo, hi, slope)) if slope else TemperedSigmoid.unit_slope
    return mk(*MEAN_BOUNDS), mk(*VAR_BOUNDS)


@dataclass
class Batch:
    """Network-ready view of a set of samples.

    ``X`` holds float counts per layer, ``logX`` their ``log1p``, ``seq`` the
    ``log1p`` layers zero-padded to the widest layer, ``cov`` the prepared
    covariates (intercept last) or ``None``.
    """

    X: list
    logX: list
    seq: list
    cov: torch.Tensor | None
    log_total: torch.Tensor

    @property
    def n(self):
        return self.X[0].shape[0]


def make_batch(model, layers, covariates=None) -> Batch:
    X = [ad.tensor(np.asarray(x, dtype=np.float64)) for x in layers]
    logX = [torch.log1p(x) for x in X]
    kmax = max(model.tree.layer_sizes)
    seq = [nn.functional.pad(lx, (0, kmax - lx.shape[-1])) for lx in logX]
    cov = model.prepare_covariates(covariates)
    log_total = torch.log1p(X[0].sum(-1, keepdim=True))
    return Batch(X, logX, seq, cov, log_total)


@dataclass
class PosteriorDraw:
    """Reparameterized draws, ``R`` per sample, on free coordinates.

    ``z[l]``, ``m[l]``, ``S[l]`` and ``eps[l]`` have shape (R, n, d_l);
    ``logq`` has shape (R, n).
    """

    z: list
    m: list
    S: list
    eps: list
    logq: torch.Tensor


def diag_gauss_logpdf(z, m, S):
    return -0.5 * (math.log(2 * math.pi) + torch.log(S) + (z - m) ** 2 / S).sum(-1)


class _Family(nn.Module):
    def __init__(self, model, slope=None):
        super().__init__()
        self.tree = model.tree
        self.dims = list(model.dims)
        self.n_cov = model.arch.n_covariates
        self.mean_bound, self.var_bound = _bounds(slope)
        self.offset_net = None

    def _head_pair(self, key, n_in, d, n_layers, activation, gen, init_mean):
        spec = MlpSpec(n_in, d, n_layers - 1, max(n_in, 1), activation)
        mnet, snet = Mlp(spec, gen), Mlp(spec, gen)
        with torch.no_grad():
            mnet.layers[-1].bias.copy_(self.mean_bound.inverse(ad.tensor(init_mean)))
            snet.layers[-1].bias.fill_(self.var_bound.inverse(INIT_VARIANCE))
        self.mean_heads[key] = mnet
        self.var_heads[key] = snet

    def _gauss(self, key, inp):
        return self.mean_bound(self.mean_heads[key](inp)), self.var_bound(self.var_heads[key](inp))

    @staticmethod
    def _cat(parts, lead):
        parts = [p.expand(lead + p.shape[-1:]) for p in parts if p is not None]
        return torch.cat(parts, dim=-1)

    def enable_offset(self, hidden=8, seed=0, init_mean=0.0, init_var=INIT_VARIANCE):
        """Amortized Gaussian ``q(O | X)`` fed with the log total count of the roots."""
        gen = make_generator(seed + 7919)
        spec = MlpSpec(1, 1, 1, hidden, "tanh")
        self.offset_net = nn.ModuleDict({"m": Mlp(spec, gen), "s": Mlp(spec, gen)})
        with torch.no_grad():
            self.offset_net["m"].layers[-1].bias.fill_(float(self.mean_bound.inverse(init_mean)))
            self.offset_net["s"].layers[-1].bias.fill_(float(self.var_bound.inverse(init_var)))

    def offset_params(self, batch: Batch):
        return offset_posterior(self, batch.log_total)

    def _result(self, z, m, S, eps):
        logq = 0.0
        for l in range(len(z)):
            if z[l] is not None and z[l].shape[-1]:
                logq = logq + diag_gauss_logpdf(z[l], m[l], S[l])
        R, n = eps[0].shape[:2]
        if not torch.is_tensor(logq):
            logq = torch.zeros(R, n, dtype=DTYPE)
        return PosteriorDraw(z, m, S, eps, logq)

    def _noise(self, n_draws, n, gen, eps):
        if eps is not None:
            return list(eps)
        gen = gen if isinstance(gen, torch.Generator) else make_generator(0 if gen is None else gen)
        return [torch.randn((n_draws, n, d), generator=gen, dtype=DTYPE) for d in self.dims]


def offset_posterior(fam, log_total):
    """``(m_o, s_o^2)`` of the Gaussian offset posterior, each of shape (n,)."""
    if fam.offset_net is None:
        raise ValueError("offset modeling is not enabled on this family")
    m = fam.mean_bound(fam.offset_net["m"](log_total)).squeeze(-1)
    s2 = fam.var_bound(fam.offset_net["s"](log_total)).squeeze(-1)
    return m, s2


class BackwardVariational(_Family):
    """Residual amortized backward Gaussian Markov chain.

    Parameters
    ----------
    model : PlnTree
        Provides the tree, free coordinates and covariate dimension.
    arch : BackwardArch
    seed : int
    init_means : list of array_like, optional
        Initial output of each mean head (free coordinates); defaults to zeros.
    """

    kind = "backward"

    def __init__(self, model, arch: BackwardArch | None = None, seed=0, init_means=None):
        arch = arch or BackwardArch()
        super().__init__(model, arch.slope)
        self.arch = arch
        gen = make_generator(seed)
        K = self.tree.layer_sizes
        L = self.tree.n_layers
        init_means = init_means or [np.zeros(d) for d in self.dims]
        self.embedder = None
        if not arch.strongly_amortized:
            self.embedder = RecurrentEmbedder(
                GruSpec(max(K), arch.hidden_size, arch.n_stacked_layers, arch.embedding_dim,
                        arch.cell), gen)
        E = 0 if arch.strongly_amortized else arch.embedding_dim
        self.mean_heads = nn.ModuleDict()
        self.var_heads = nn.ModuleDict()
        for l in range(L):
            d = self.dims[l]
            if d == 0:
                continue
            z_in = self.dims[l + 1] if l < L - 1 else 0
            n_in = z_in + E + K[l] + self.n_cov
            self._head_pair(str(l), n_in, d, arch.head_layers, arch.activation, gen, init_means[l])

    def embeddings(self, batch: Batch):
        if self.embedder is None:
            return [None] * self.tree.n_layers
        return self.embedder(batch.seq)

    def layer_params(self, l, z_next, E, batch: Batch, lead):
        """Mean and variance of layer ``l`` given the draw of layer ``l + 1``.

        The head sees exactly ``(Z^{l+1}, E^l, log1p X^l)`` (plus covariates).
        """
        cov = None if batch.cov is None else batch.cov[:, :-1]
        inp = self._cat([z_next, E, batch.logX[l], cov], lead)
        return self._gauss(str(l), inp)

    def sample(self, batch: Batch, n_draws=1, gen=None, eps=None) -> PosteriorDraw:
        L = self.tree.n_layers
        n = batch.n
        eps = self._noise(n_draws, n, gen, eps)
        lead = (eps[0].shape[0], n)
        Es = self.embeddings(batch)
        z, m, S = [None] * L, [None] * L, [None] * L
        z_next = None
        for l in range(L - 1, -1, -1):
            d = self.dims[l]
            if d == 0:
                empty = torch.zeros(lead + (0,), dtype=DTYPE)
                z[l], m[l], S[l] = empty, empty, empty
            else:
                m[l], S[l] = self.layer_params(l, z_next, Es[l], batch, lead)
                z[l] = m[l] + torch.sqrt(S[l]) * eps[l]
            z_next = z[l]
        return self._result(z, m, S, eps)


class MeanFieldVariational(_Family):
    """Independent Gaussian per layer with parameters depending on ``X^l`` only."""

    kind = "mean-field"

    def __init__(self, model, arch: MeanFieldArch | None = None, seed=0, init_means=None):
        arch = arch or MeanFieldArch()
        super().__init__(model, arch.slope)
        self.arch = arch
        gen = make_generator(seed)
        K = self.tree.layer_sizes
        init_means = init_means or [np.zeros(d) for d in self.dims]
        self.mean_heads = nn.ModuleDict()
        self.var_heads = nn.ModuleDict()
        for l, d in enumerate(self.dims):
            if d == 0:
                continue
            spec_in = K[l] + self.n_cov
            spec = MlpSpec(spec_in, d, arch.head_layers - 1, K[l], arch.activation)
            mnet, snet = Mlp(spec, gen), Mlp(spec, gen)
            with torch.no_grad():
                mnet.layers[-1].bias.copy_(self.mean_bound.inverse(ad.tensor(init_means[l])))
                snet.layers[-1].bias.fill_(self.var_bound.inverse(INIT_VARIANCE))
            self.mean_heads[str(l)] = mnet
            self.var_heads[str(l)] = snet

    def layer_params(self, l, batch: Batch):
        cov = None if batch.cov is None else batch.cov[:, :-1]
        inp = batch.logX[l] if cov is None else torch.cat([batch.logX[l], cov], -1)
        return self._gauss(str(l), inp)

    def sample(self, batch: Batch, n_draws=1, gen=None, eps=None) -> PosteriorDraw:
        n = batch.n
        eps = self._noise(n_draws, n, gen, eps)
        lead = (eps[0].shape[0], n)
        z, m, S = [], [], []
        for l, d in enumerate(self.dims):
            if d == 0:
                empty = torch.zeros(lead + (0,), dtype=DTYPE)
                z.append(empty), m.append(empty), S.append(empty)
                continue
            ml, Sl = self.layer_params(l, batch)
            ml, Sl = ml.expand(lead + (d,)), Sl.expand(lead + (d,))
            m.append(ml)
            S.append(Sl)
            z.append(ml + torch.sqrt(Sl) * eps[l])
        return self._result(z, m, S, eps)


def build_family(model, arch, seed=0, init_means=None):
    if isinstance(arch, BackwardArch):
        return BackwardVariational(model, arch, seed, init_means)
    if isinstance(arch, MeanFieldArch):
        return MeanFieldVariational(model, arch, seed, init_means)
    raise TypeError(f"unknown variational architecture {type(arch).__name__}")


def sample_posterior(fam, model, data_layers, n_draws=1, seed=0, covariates=None) -> PosteriorDraw:
    """Draws from ``q(Z | X)`` for a list of per-layer count arrays."""
    batch = make_batch(model, data_layers, covariates)
    with torch.no_grad():
        return fam.sample(batch, n_draws, make_generator(seed))


def encode(fam, model, data_layers, n_draws=100, seed=0, covariates=None) -> list:
    """Posterior means as full-width arrays ``(n, K_l)``.

    Mean-field means are exact. For the backward chain the terminal mean is
    exact and each upper layer averages ``m_l(Z^{l+1})`` over the draws, which
    by the tower property estimates ``E_q[Z^l]``.
    """
    draw = sample_posterior(fam, model, data_layers, n_draws, seed, covariates)
    out = []
    for l in range(fam.tree.n_layers):
        if isinstance(fam, MeanFieldVariational):
            mean = draw.m[l][0]
        else:
            mean = draw.m[l].mean(0)
        out.append(model.full(l, mean).numpy())
    return out


def decode_means(tree, Z, O=None) -> list:
    """Deterministic emission means: ``exp(Z^1 + O)`` at the roots, then each
    parent's mean split by the softmax of its children's latents."""
    z0 = np.asarray(Z[0], dtype=np.float64)
    if O is not None:
        z0 = z0 + np.asarray(O, dtype=np.float64)[:, None]
    out = [np.exp(np.minimum(z0, MEAN_BOUNDS[1]))]
    for l in range(1, tree.n_layers):
        par = tree.parents[l - 1]
        z = np.asarray(Z[l], dtype=np.float64)
        zmax = np.full(z.shape[:-1] + (tree.layer_sizes[l - 1],), -np.inf)
        np.maximum.at(zmax, (..., par), z)
        e = np.exp(z - zmax[..., par])
        tot = np.zeros_like(zmax)
        np.add.at(tot, (..., par), e)
        out.append(out[-1][..., par] * e / tot[..., par])
    return out


def reconstruct(fam, model, data_layers, n_draws=100, seed=0, covariates=None) -> list:
    """Counts reconstructed from the posterior mean through the emission means."""
    Z = encode(fam, model, data_layers, n_draws, seed, covariates)
    O = None
    if fam.offset_net is not None:
        batch = make_batch(model, data_layers, covariates)
        with torch.no_grad():
            O = offset_posterior(fam, batch.log_total)[0].numpy()
    return decode_means(model.tree, Z, O)
