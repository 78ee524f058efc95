"""The PLN-Tree generative model.

The latent process is a Gaussian Markov chain over the layers of the tree,

    Z^1 ~ N(mu_1, Sigma_1),    Z^{l+1} | Z^l ~ N(mu_{l+1}(Z^l), Sigma_{l+1}(Z^l)),

the roots emit ``X^1 ~ Poisson(exp(Z^1))`` and every parent count is split
among its children with ``Multinomial(X_k^l, softmax(Z_{C(l,k)}^{l+1}))``.

Only-children carry no latent coordinate (their softmax is constant) so each
Gaussian lives on the free coordinates of its layer; full-width latent arrays
hold 0 at the only-child positions.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .autodiff import DTYPE
from .features import BlockCentering
from .hierarchy import HierarchicalCounts, HierarchicalDataset, TreeLayout, CountsError
from .neural import MEAN_BOUNDS, Mlp, MlpSpec, make_generator

log = logging.getLogger(__name__)

LAMBDA = 1e-4


@dataclass
class ModelArch:
    """Architecture of the generative side.

    ``transition_layers`` counts the affine layers of each transition network
    (so ``transition_layers - 1`` hidden layers). Hidden widths follow the
    tree: ``K_{l-1}`` for the mean and ``K_{l-1} (K_l + 1) / 2`` for the
    Cholesky factor.
    """

    transition_layers: int = 2
    activation: str = "tanh"
    lam: float = LAMBDA
    n_covariates: int = 0
    offset_components: int = 0

    def __post_init__(self):
        if self.transition_layers < 1:
            raise ValueError("transition_layers must be >= 1")
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.n_covariates < 0 or self.offset_components < 0:
            raise ValueError("n_covariates and offset_components must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentStates:
    """Latent draws for ``n`` samples: ``Z[l]`` is ``(n, K_l)``, ``O`` is ``(n,)``."""

    Z: list
    O: np.ndarray | None = None

    def __len__(self):
        return self.Z[0].shape[0]

    def __getitem__(self, i):
        return LatentStates([z[i:i + 1] for z in self.Z],
                            None if self.O is None else self.O[i:i + 1])


class OffsetModel(nn.Module):
    """Univariate Gaussian mixture prior on the per-sample log offset ``O``."""

    def __init__(self, n_comp=2, means=None, variances=None, weights=None):
        super().__init__()
        if n_comp < 1:
            raise ValueError("n_comp must be >= 1")
        means = np.linspace(-0.5, 0.5, n_comp) if means is None and n_comp > 1 else means
        means = np.zeros(n_comp) if means is None else np.asarray(means, dtype=np.float64)
        variances = np.ones(n_comp) if variances is None else np.asarray(variances, dtype=np.float64)
        weights = np.full(n_comp, 1.0 / n_comp) if weights is None else np.asarray(weights, dtype=np.float64)
        if np.any(variances <= 0) or np.any(weights <= 0):
            raise ValueError("mixture variances and weights must be positive")
        self.n_comp = n_comp
        self.logits = nn.Parameter(ad.tensor(np.log(weights / weights.sum())))
        self.means = nn.Parameter(ad.tensor(means))
        self.log_vars = nn.Parameter(ad.tensor(np.log(variances)))

    @property
    def weights(self):
        return torch.softmax(self.logits, dim=-1)

    def log_prob(self, o):
        o = o.unsqueeze(-1)
        var = torch.exp(self.log_vars)
        comp = -0.5 * (math.log(2 * math.pi) + self.log_vars + (o - self.means) ** 2 / var)
        return torch.logsumexp(torch.log_softmax(self.logits, -1) + comp, dim=-1)

    def sample(self, n, rng):
        with torch.no_grad():
            w = self.weights.numpy()
            mu = self.means.numpy()
            sd = np.exp(0.5 * self.log_vars.numpy())
        comp = rng.choice(self.n_comp, size=n, p=w / w.sum())
        return mu[comp] + sd[comp] * rng.standard_normal(n)


class PlnTree(nn.Module):
    """Parameters of a PLN-Tree model on a fixed tree.

    Parameters
    ----------
    tree : TreeLayout
    arch : ModelArch, optional
    seed : int
        Seed of the random initialization of the transition networks.
    """

    def __init__(self, tree: TreeLayout, arch: ModelArch | None = None, seed=0):
        super().__init__()
        self.tree = tree
        self.arch = arch = arch or ModelArch()
        gen = make_generator(seed)
        self.dims = tree.latent_dims()
        self.free_idx = [torch.as_tensor(np.flatnonzero(tree.latent_mask(l)), dtype=torch.int64)
                         for l in range(tree.n_layers)]
        d0 = self.dims[0]
        self.mu1 = nn.Parameter(torch.zeros(d0, dtype=DTYPE))
        self.sigma1_lower = nn.Parameter(torch.zeros(d0, d0, dtype=DTYPE))
        self.sigma1_logdiag = nn.Parameter(torch.zeros(d0, dtype=DTYPE))
        p = arch.n_covariates
        self.B = nn.Parameter(torch.zeros(p + 1, d0, dtype=DTYPE)) if p else None
        # standardization of covariates, set at fit time
        self.cov_mean = np.zeros(p)
        self.cov_scale = np.ones(p)

        self.centering = {}
        mean_nets, chol_nets = {}, {}
        K = tree.layer_sizes
        for l in range(1, tree.n_layers):
            d = self.dims[l]
            if d == 0:
                continue
            n_in = self.dims[l - 1] + p
            hidden = arch.transition_layers - 1
            mean_nets[str(l)] = Mlp(MlpSpec(n_in, d, hidden, K[l - 1], arch.activation), gen)
            chol_nets[str(l)] = Mlp(MlpSpec(n_in, d * (d + 1) // 2, hidden,
                                            K[l - 1] * (K[l] + 1) // 2, arch.activation), gen)
            self.centering[l] = BlockCentering(tree, l)
        self.mean_nets = nn.ModuleDict(mean_nets)
        self.chol_nets = nn.ModuleDict(chol_nets)
        self.offset = OffsetModel(arch.offset_components) if arch.offset_components else None

    # -- first layer -----------------------------------------------------------------

    def sigma1_factor(self):
        return torch.tril(self.sigma1_lower, -1) + torch.diag(torch.exp(self.sigma1_logdiag))

    def sigma1(self):
        L = self.sigma1_factor()
        return L @ L.T

    @torch.no_grad()
    def set_first_layer(self, mu=None, sigma=None):
        """Assign ``mu_1`` and/or ``Sigma_1`` (factorized with jitter escalation)."""
        if mu is not None:
            self.mu1.copy_(ad.tensor(mu).reshape(self.mu1.shape))
        if sigma is not None:
            L = ad.cholesky(ad.tensor(sigma))
            self.sigma1_lower.copy_(torch.tril(L, -1))
            self.sigma1_logdiag.copy_(torch.log(torch.diagonal(L)))

    def prepare_covariates(self, C):
        """Standardized covariates with an intercept column, as a tensor."""
        if self.B is None:
            if C is not None:
                raise CountsError("the model was built without covariates")
            return None
        if C is None:
            raise CountsError("the model needs covariates")
        C = np.asarray(C, dtype=np.float64)
        if C.ndim != 2 or C.shape[1] != self.arch.n_covariates:
            raise CountsError(f"covariates must have {self.arch.n_covariates} columns")
        Cs = (C - self.cov_mean) / self.cov_scale
        return ad.tensor(np.hstack([Cs, np.ones((C.shape[0], 1))]))

    def first_mean(self, cov=None, n=None):
        if self.B is not None:
            return cov @ self.B
        return self.mu1 if n is None else self.mu1.expand(n, -1)

    # -- transitions -----------------------------------------------------------------

    def transition(self, l, z_prev, cov=None):
        """Mean and covariance factor of ``Z^l | Z^{l-1}`` on free coordinates.

        ``z_prev`` holds the free coordinates of layer ``l - 1``; ``cov`` the
        prepared covariates (intercept last, dropped here).
        """
        d = self.dims[l]
        inp = z_prev
        if cov is not None:
            c = cov[..., :-1]
            if c.dim() < inp.dim():
                c = c.expand(inp.shape[:-1] + c.shape[-1:])
            inp = torch.cat([inp, c], dim=-1)
        mean = self.centering[l](self.mean_nets[str(l)](inp))
        raw = self.chol_nets[str(l)](inp)
        rows, cols = torch.tril_indices(d, d)
        Lt = _fill_tril(raw, d, rows, cols)
        diag = nn.functional.softplus(torch.diagonal(Lt, dim1=-2, dim2=-1))
        Lt = torch.tril(Lt, -1) + torch.diag_embed(diag)
        sigma = Lt @ Lt.transpose(-1, -2) + self.arch.lam * torch.eye(d, dtype=DTYPE)
        return mean, ad.cholesky(sigma)

    def free(self, l, z_full):
        return z_full.index_select(-1, self.free_idx[l])

    def full(self, l, z_free):
        K = self.tree.layer_sizes[l]
        out = torch.zeros(z_free.shape[:-1] + (K,), dtype=z_free.dtype)
        if self.dims[l] == 0:
            return out
        return out.index_copy(-1, self.free_idx[l], z_free)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
        return h.hexdigest()


def _fill_tril(raw, d, rows, cols):
    out = torch.zeros(raw.shape[:-1] + (d * d,), dtype=raw.dtype)
    out = out.index_copy(-1, rows * d + cols, raw)
    return out.reshape(raw.shape[:-1] + (d, d))


# -- initialization -------------------------------------------------------------------


def pln_init(x1):
    """Log-mean and log-covariance of first-layer counts (zeros read as ones).

    Returns ``(mu, Sigma)`` with ``Sigma`` the unbiased empirical covariance
    of ``log max(X, 1)``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    if x1.ndim != 2:
        raise ValueError("expected an (n, K) matrix")
    n = x1.shape[0]
    if n < 2:
        raise ValueError("PLN initialization needs at least 2 samples")
    dead = np.all(x1 == 0, axis=0)
    if np.any(dead):
        warnings.warn(f"first-layer nodes {np.flatnonzero(dead).tolist()} are zero in every "
                      "sample; their mean is set to 0", RuntimeWarning, stacklevel=2)
    lx = np.log(np.maximum(x1, 1.0))
    mu = lx.mean(axis=0)
    r = lx - mu
    return mu, r.T @ r / (n - 1)


def init_from_data(tree: TreeLayout, data: HierarchicalDataset, arch: ModelArch | None = None,
                   seed=0) -> PlnTree:
    """Model with first layer set by the PLN initialization and random transitions."""
    if data.tree != tree:
        raise ValueError("dataset and model trees differ")
    arch = arch or ModelArch(n_covariates=0 if data.covariates is None else data.covariates.shape[1])
    model = PlnTree(tree, arch, seed)
    mu, sigma = pln_init(data.layers[0])
    model.set_first_layer(mu, sigma)
    if model.B is not None:
        C = data.covariates
        if C is None:
            raise CountsError("the architecture expects covariates but the dataset has none")
        model.cov_mean = C.mean(axis=0)
        sd = C.std(axis=0)
        model.cov_scale = np.where(sd > 0, sd, 1.0)
        with torch.no_grad():
            model.B.zero_()
            model.B[-1] = ad.tensor(mu)
    if model.offset is not None:
        lt = np.log(np.maximum(data.layers[0].sum(axis=1), 1.0))
        lt = lt - lt.mean()
        nc = model.offset.n_comp
        qs = np.quantile(lt, (np.arange(nc) + 0.5) / nc)
        v = max(float(lt.var()) / nc, 1e-2)
        with torch.no_grad():
            model.offset.means.copy_(ad.tensor(qs))
            model.offset.log_vars.fill_(math.log(v))
    return model


# -- sampling -------------------------------------------------------------------------


@torch.no_grad()
def sample_latents(model: PlnTree, n: int, seed, covariates=None) -> LatentStates:
    """Ancestral draws of the latent chain (and offsets when modeled)."""
    rng = np.random.default_rng(seed)
    cov = model.prepare_covariates(covariates)
    if cov is not None and cov.shape[0] != n:
        raise CountsError(f"expected covariates for {n} samples, got {cov.shape[0]}")
    d0 = model.dims[0]
    L1 = model.sigma1_factor()
    z = model.first_mean(cov, n) + ad.tensor(rng.standard_normal((n, d0))) @ L1.T
    Z = [model.full(0, z).numpy()]
    for l in range(1, model.tree.n_layers):
        if model.dims[l] == 0:
            Z.append(np.zeros((n, model.tree.layer_sizes[l])))
            z = z.new_zeros((n, 0))
            continue
        mean, L = model.transition(l, z, cov)
        eps = ad.tensor(rng.standard_normal((n, model.dims[l])))
        z = mean + (L @ eps.unsqueeze(-1)).squeeze(-1)
        Z.append(model.full(l, z).numpy())
    O = model.offset.sample(n, rng) if model.offset is not None else None
    return LatentStates(Z, O)


def _softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sample_counts(tree: TreeLayout, latents: LatentStates, seed) -> HierarchicalDataset:
    """Poisson roots then multinomial splits; satisfies compositionality by construction.

    Log-rates are capped at the upper mean bound (25) to keep rates finite.
    """
    rng = np.random.default_rng(seed)
    Z = latents.Z
    logit = np.asarray(Z[0], dtype=np.float64)
    if latents.O is not None:
        logit = logit + np.asarray(latents.O)[:, None]
    X = [rng.poisson(np.exp(np.minimum(logit, MEAN_BOUNDS[1])))]
    for l in range(1, tree.n_layers):
        n = X[-1].shape[0]
        x = np.zeros((n, tree.layer_sizes[l]), dtype=np.int64)
        for k, ch in enumerate(tree.sibling_groups(l)):
            if ch.size == 1:
                x[:, ch[0]] = X[-1][:, k]
            else:
                x[:, ch] = rng.multinomial(X[-1][:, k], _softmax_np(np.asarray(Z[l])[:, ch]))
        X.append(x)
    return HierarchicalDataset(tree, X, validate=False)


def seed_sequence(seed) -> np.random.SeedSequence:
    """``seed`` as a SeedSequence (ints, int sequences and SeedSequences accepted)."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def generate(model: PlnTree, n: int, seed, covariates=None) -> HierarchicalDataset:
    """Draw ``n`` samples; latents and counts use independent substreams of ``seed``."""
    ss = seed_sequence(seed)
    s_lat, s_cnt = ss.spawn(2)
    lat = sample_latents(model, n, s_lat, covariates)
    data = sample_counts(model.tree, lat, s_cnt)
    data.covariates = None if covariates is None else np.asarray(covariates, dtype=np.float64)
    return data


# -- densities ------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def parent_tensor(tree: TreeLayout, l: int) -> torch.Tensor:
    """Parent labels of layer ``l`` as an int64 tensor (cached per tree)."""
    return torch.tensor(np.array(tree.parents[l - 1]), dtype=torch.int64)


def log_prior(model: PlnTree, Z, cov=None):
    """``log p(Z)`` for full-width latent tensors ``Z[l]`` of shape (..., K_l)."""
    z = model.free(0, Z[0])
    mean = model.first_mean(cov)
    out = ad.mvn_logpdf_from_factor(z, mean, model.sigma1_factor())
    for l in range(1, model.tree.n_layers):
        if model.dims[l] == 0:
            continue
        zl = model.free(l, Z[l])
        mean, L = model.transition(l, model.free(l - 1, Z[l - 1]), cov)
        out = out + ad.mvn_logpdf_from_factor(zl, mean, L)
    return out


def log_emission(tree: TreeLayout, X, Z, O=None):
    """``log p(X | Z)``: Poisson roots plus multinomial splits (with factorials)."""
    x0 = X[0]
    logit = Z[0] if O is None else Z[0] + O.unsqueeze(-1)
    out = (x0 * logit - torch.exp(logit) - torch.lgamma(x0 + 1)).sum(-1)
    for l in range(1, tree.n_layers):
        lse = ad.group_logsumexp(Z[l], parent_tensor(tree, l), tree.layer_sizes[l - 1])
        xp = X[l - 1]
        out = out + (torch.lgamma(xp + 1) - xp * lse).sum(-1)
        out = out + (X[l] * Z[l] - torch.lgamma(X[l] + 1)).sum(-1)
    return out


def joint_log_density(model: PlnTree, counts, latents, covariates=None) -> float:
    """``log p(X, Z)`` of one sample.

    ``counts`` is a HierarchicalCounts or a list of per-layer vectors;
    ``latents`` a LatentStates of one sample or a list of per-layer vectors.
    Counts breaking compositionality have density 0: the result is ``-inf``
    and a RuntimeWarning is emitted.
    """
    tree = model.tree
    layers = counts.layers if isinstance(counts, HierarchicalCounts) else counts
    layers = [np.asarray(x, dtype=np.float64).reshape(-1) for x in layers]
    for l in range(tree.n_layers - 1):
        par = tree.parents[l]
        agg = np.zeros(tree.layer_sizes[l])
        np.add.at(agg, par, layers[l + 1])
        if not np.array_equal(agg, layers[l]):
            warnings.warn("counts violate tree compositionality: density is 0", RuntimeWarning,
                          stacklevel=2)
            return -math.inf
    if isinstance(latents, LatentStates):
        Z, O = [np.asarray(z).reshape(-1) for z in latents.Z], latents.O
    else:
        Z, O = [np.asarray(z, dtype=np.float64).reshape(-1) for z in latents], None
    cov = model.prepare_covariates(None if covariates is None else np.atleast_2d(covariates))
    with torch.no_grad():
        Zt = [ad.tensor(z).unsqueeze(0) for z in Z]
        Xt = [ad.tensor(x).unsqueeze(0) for x in layers]
        Ot = None if O is None else ad.tensor(np.asarray(O).reshape(1))
        val = log_prior(model, Zt, cov) + log_emission(tree, Xt, Zt, Ot)
        if Ot is not None:
            val = val + model.offset.log_prob(Ot)
    return float(val[0])
