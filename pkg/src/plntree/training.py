"""Evidence lower bound, closed-form updates and the training loop.

The ELBO of a sample decomposes layer by layer. With ``d_l`` free latent
coordinates at layer ``l`` and variational parameters ``(m_l, S_l)``:

* Gaussian prior cross term ``E_q[log N(Z^l; mu_l, Sigma_l)]``. Whenever the
  prior parameters of layer ``l`` do not depend on ``Z^l``'s own draw (the
  roots under the backward chain, every layer under mean field), it is taken
  in closed form as ``-1/2 (d log 2 pi + log|Sigma| + tr(Sigma_hat Sigma^{-1}))``
  with ``Sigma_hat = (mu - m)(mu - m)^T + S``. Otherwise it is evaluated at the
  draw.
* Entropy ``1/2 log|S| + d/2 (1 + log 2 pi)``, exact.
* Poisson roots ``sum_k X_k m_k - exp(m_k + S_k / 2)``, exact given ``Z^2``.
* Multinomial splits ``sum_j X_j m_j - sum_k X_k logsumexp(Z_{C(k)})``, the
  linear part through the tower property and the log-sum-exp at the draws.
* ``-sum log X^L!``: the factorials of the upper layers cancel between the
  Poisson and multinomial terms.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import DTYPE
from .hierarchy import HierarchicalDataset
from .model import ModelArch, PlnTree, init_from_data, log_emission, log_prior, parent_tensor
from .neural import Adam, make_generator
from .variational import (Batch, BackwardArch, MeanFieldVariational, PosteriorDraw,
                          build_family, diag_gauss_logpdf, make_batch)

log = logging.getLogger(__name__)

LOG2PI = math.log(2 * math.pi)
OFFSET_WEIGHT = 2.0
GH_NODES = 32
MAX_IS_DIM = 16


class NonFiniteElbo(FloatingPointError):
    def __init__(self, term, layer=None):
        self.term = term
        self.layer = layer
        where = "" if layer is None else f" at layer {layer + 1}"
        super().__init__(f"ELBO term {term!r}{where} is not finite")


class TrainingDiverged(RuntimeError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"training diverged after {len(report.elbo_trace)} iterations "
                         "(non-finite ELBO twice in a row)")


# -- ELBO -----------------------------------------------------------------------------


@dataclass
class ElboTerms:
    """Summands of the ELBO, each of shape (R, n) (draws by samples).

    ``gauss`` maps layer to a dict with the ``logdet`` (``-1/2 log|Sigma|``),
    ``trace`` (``-1/2 tr(Sigma_hat Omega)``) and ``const`` parts of the prior
    cross term; ``entropy`` maps layer to ``1/2 log|S| + d/2 (1 + log 2 pi)``.
    ``sigma_hat`` keeps the root-layer ``Sigma_hat`` when it is used.
    """

    gauss: dict = field(default_factory=dict)
    entropy: dict = field(default_factory=dict)
    poisson_linear: torch.Tensor | None = None
    poisson_moment: torch.Tensor | None = None
    multinomial_linear: dict = field(default_factory=dict)
    multinomial_lse: dict = field(default_factory=dict)
    factorial: torch.Tensor | None = None
    offset: dict = field(default_factory=dict)
    sigma_hat: torch.Tensor | None = None

    def items(self):
        for l, parts in self.gauss.items():
            for k, v in parts.items():
                yield f"gauss_{k}", l, v
        for l, v in self.entropy.items():
            yield "entropy", l, v
        yield "poisson_linear", 0, self.poisson_linear
        yield "poisson_moment", 0, self.poisson_moment
        for l, v in self.multinomial_linear.items():
            yield "multinomial_linear", l, v
        for l, v in self.multinomial_lse.items():
            yield "multinomial_lse", l, v
        yield "factorial", None, self.factorial
        for k, v in self.offset.items():
            yield f"offset_{k}", None, v

    def per_sample(self) -> torch.Tensor:
        """ELBO of each sample (mean over draws), shape (n,)."""
        total = 0.0
        for name, layer, v in self.items():
            if v is None:
                continue
            v = v.mean(0) if v.dim() == 2 else v
            total = total + v
        return total

    def check_finite(self):
        for name, layer, v in self.items():
            if v is not None and not bool(torch.isfinite(v).all()):
                raise NonFiniteElbo(name, layer)


def _gauss_cross(mean, L, m, S=None):
    """Parts of ``E[log N(Z; mean, L L^T)]`` for ``Z ~ N(m, diag S)`` (point if S is None)."""
    d = m.shape[-1]
    shape = torch.broadcast_shapes(mean.shape, m.shape)
    Lb = L.expand(shape[:-1] + L.shape[-2:])
    r = (mean - m).expand(shape)
    y = ad.triangular_solve(Lb, r.unsqueeze(-1)).squeeze(-1)
    tr = (y * y).sum(-1)
    if S is not None:
        eye = torch.eye(d, dtype=DTYPE).expand(L.shape)
        Linv = ad.triangular_solve(L, eye)
        omega_diag = (Linv * Linv).sum(-2)
        tr = tr + (S * omega_diag).sum(-1)
    logdet = ad.logdet_from_factor(L).expand(shape[:-1])
    return {"logdet": -0.5 * logdet, "trace": -0.5 * tr,
            "const": torch.full(shape[:-1], -0.5 * d * LOG2PI, dtype=DTYPE)}


def _gh_expect_log_prior(offset_model, m_o, s2_o):
    x, w = np.polynomial.hermite.hermgauss(GH_NODES)
    x = ad.tensor(x)
    w = ad.tensor(w / math.sqrt(math.pi))
    o = m_o.unsqueeze(-1) + torch.sqrt(2.0 * s2_o).unsqueeze(-1) * x
    return (offset_model.log_prob(o) * w).sum(-1)


def elbo_terms(model: PlnTree, fam, batch: Batch, draw: PosteriorDraw,
               offset_weight: float = OFFSET_WEIGHT) -> ElboTerms:
    """All ELBO summands for the given posterior draws."""
    tree = model.tree
    Lyr = tree.n_layers
    n = batch.n
    mean_field = isinstance(fam, MeanFieldVariational)
    T = ElboTerms()
    R = draw.eps[0].shape[0]
    lead = (R, n)

    full = [model.full(l, draw.z[l]) for l in range(Lyr)]
    for l in range(Lyr):
        d = model.dims[l]
        if d == 0:
            continue
        m, S = draw.m[l], draw.S[l]
        if l == 0:
            mean = model.first_mean(batch.cov)
            L = model.sigma1_factor()
        else:
            mean, L = model.transition(l, draw.z[l - 1], batch.cov)
        if l == 0 or mean_field:
            T.gauss[l] = _gauss_cross(mean, L, m, S)
            if l == 0:
                r = (mean - m).expand(lead + (d,))
                T.sigma_hat = ad.outer(r, r) + ad.diag(S)
        else:
            T.gauss[l] = _gauss_cross(mean, L, draw.z[l])
        T.entropy[l] = 0.5 * torch.log(S).sum(-1) + 0.5 * d * (1 + LOG2PI)

    # observation terms on full-width means (only-children have m = 0)
    m_full = [model.full(l, draw.m[l]) for l in range(Lyr)]
    X = batch.X
    m0, S0 = m_full[0], model.full(0, draw.S[0])
    shift, shift_var = 0.0, 0.0
    if model.offset is not None:
        m_o, s2_o = fam.offset_params(batch)
        shift, shift_var = m_o.unsqueeze(-1), s2_o.unsqueeze(-1)
    T.poisson_linear = (X[0] * (m0 + shift)).sum(-1)
    T.poisson_moment = -torch.exp(m0 + 0.5 * S0 + shift + 0.5 * shift_var).sum(-1)
    for l in range(1, Lyr):
        par = parent_tensor(tree, l)
        T.multinomial_linear[l] = (X[l] * m_full[l]).sum(-1)
        lse = ad.group_logsumexp(full[l], par, tree.layer_sizes[l - 1])
        T.multinomial_lse[l] = -(X[l - 1] * lse).sum(-1)
    T.factorial = -torch.lgamma(X[-1] + 1).sum(-1).expand(lead)
    if model.offset is not None:
        T.offset["log_prior"] = offset_weight * _gh_expect_log_prior(model.offset, m_o, s2_o)
        T.offset["entropy"] = 0.5 * torch.log(s2_o) + 0.5 * (1 + LOG2PI)
    return T


def elbo_estimate(model: PlnTree, fam, batch, n_mc: int = 1, gen=None, eps=None,
                  covariates=None, offset_weight: float = OFFSET_WEIGHT, return_terms=False):
    """Monte-Carlo ELBO averaged over the batch (differentiable).

    ``batch`` is a :class:`Batch` or a list of per-layer count arrays. Noise
    comes from ``gen`` (a torch Generator or seed) unless ``eps`` is given.
    With an offset model, the offset terms follow the corrected decomposition
    scaled by ``offset_weight`` on ``E_q[log p(O)]``.
    """
    if not isinstance(batch, Batch):
        batch = make_batch(model, batch, covariates)
    draw = fam.sample(batch, n_mc, gen, eps)
    T = elbo_terms(model, fam, batch, draw, offset_weight)
    T.check_finite()
    value = T.per_sample().mean()
    return (value, T, draw) if return_terms else value


def elbo_offset_estimate(model, fam, batch, n_mc=1, gen=None, eps=None, covariates=None,
                         offset_weight: float = OFFSET_WEIGHT, return_terms=False):
    """ELBO with the log-offset integrated out under ``q(O | X)``."""
    if model.offset is None or fam.offset_net is None:
        raise ValueError("offset modeling must be enabled on both the model and the family")
    return elbo_estimate(model, fam, batch, n_mc, gen, eps, covariates, offset_weight,
                         return_terms)


def offset_terms(offset_model, m_o, s2_o, offset_weight=OFFSET_WEIGHT):
    """Offset-only part: ``w E_q[log p(O)] + 1/2 log s_o^2 + (1 + log 2 pi) / 2``."""
    return (offset_weight * _gh_expect_log_prior(offset_model, m_o, s2_o)
            + 0.5 * torch.log(s2_o) + 0.5 * (1 + LOG2PI))


# -- closed-form updates --------------------------------------------------------------


def ols_covariate_update(C, M):
    """Least-squares coefficients ``B = (C^T C)^{-1} C^T M``.

    Falls back to the pseudo-inverse with a warning when ``C`` is rank deficient.
    """
    C = np.asarray(C, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if np.linalg.matrix_rank(C) < C.shape[1]:
        warnings.warn("covariate matrix is rank deficient; using the pseudo-inverse",
                      RuntimeWarning, stacklevel=2)
        return np.linalg.pinv(C) @ M
    return np.linalg.solve(C.T @ C, C.T @ M)


def closed_form_first_layer(m, S, C=None):
    """Optimal root-layer parameters given posterior draws.

    Parameters
    ----------
    m, S : array_like, shape (R, n, d) or (n, d)
        Root-layer variational means and variances, one row per draw and sample.
    C : array_like, shape (n, q), optional
        Prepared covariates; when given the mean is ``C B`` and ``B`` is
        returned instead of ``mu``.

    Returns
    -------
    (mu or B, Sigma)
        ``Sigma`` is the average of ``(mu - m)(mu - m)^T + diag(S)``; it is not
        jittered here (the model factorization adds jitter only if needed).
    """
    m = np.asarray(m, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if m.ndim == 2:
        m, S = m[None], S[None]
    R, n, d = m.shape
    if C is None:
        loc = m.reshape(-1, d).mean(axis=0)
        res = m - loc
    else:
        loc = ols_covariate_update(C, m.mean(axis=0))
        res = m - np.asarray(C) @ loc
    flat = res.reshape(-1, d)
    sigma = flat.T @ flat / (R * n) + np.diag(S.reshape(-1, d).mean(axis=0))
    return loc, 0.5 * (sigma + sigma.T)


def apply_closed_form(model: PlnTree, m, S, C=None):
    loc, sigma = closed_form_first_layer(m, S, C)
    if model.B is not None:
        with torch.no_grad():
            model.B.copy_(ad.tensor(loc))
        model.set_first_layer(sigma=sigma)
    else:
        model.set_first_layer(loc, sigma)
    return loc, sigma


# -- training -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    lr: float = 1e-3
    n_mc: int = 1
    seed: int = 0
    closed_form: bool = True
    offset: bool = False
    offset_components: int = 2
    covariates: bool = True
    patience: int | None = None
    window: int = 10
    tol: float = 1e-4
    offset_weight: float = OFFSET_WEIGHT

    def __post_init__(self):
        for name in ("epochs", "batch_size", "n_mc", "window", "offset_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    elbo_trace: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    epoch_elbo: list = field(default_factory=list)
    epochs_run: int = 0
    converged: bool = False
    rejected_steps: int = 0
    checksum: str = ""

    def moving_average(self, window=10):
        e = np.asarray(self.epoch_elbo)
        if e.size < window:
            return e[:0]
        return np.convolve(e, np.ones(window) / window, mode="valid")


def write_trace_csv(report: TrainReport, path_or_buf):
    close = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    f = open(path_or_buf, "w", newline="") if close else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "elbo", "wall_ms"])
        for i, (e, t) in enumerate(zip(report.elbo_trace, report.wall_ms)):
            w.writerow([i, repr(float(e)), f"{t:.3f}"])
    finally:
        if close:
            f.close()


def params_checksum(*modules) -> str:
    h = hashlib.sha256()
    for mod in modules:
        for name, p in sorted(mod.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def build(data: HierarchicalDataset, model_arch: ModelArch | None = None, fam_arch=None,
          config: TrainConfig | None = None):
    """Initialized model and family for ``data``."""
    config = config or TrainConfig()
    p = 0
    if config.covariates and data.covariates is not None:
        p = data.covariates.shape[1]
    if model_arch is None:
        model_arch = ModelArch(n_covariates=p,
                               offset_components=config.offset_components if config.offset else 0)
    model = init_from_data(data.tree, data, model_arch, seed=config.seed)
    init_means = [model.mu1.detach().numpy().copy()] + [np.zeros(d) for d in model.dims[1:]]
    fam = build_family(model, fam_arch or BackwardArch(), seed=config.seed + 1,
                       init_means=init_means)
    if model.offset is not None:
        fam.enable_offset(seed=config.seed)
    return model, fam


def _first_layer_params(model, config):
    if not config.closed_form:
        return set()
    skip = {id(model.mu1), id(model.sigma1_lower), id(model.sigma1_logdiag)}
    if model.B is not None:
        skip.add(id(model.B))
    return skip


def train(data: HierarchicalDataset, model_arch=None, fam_arch=None,
          config: TrainConfig | None = None, model=None, fam=None, progress=None):
    """Fit a PLN-Tree model and its variational family by ELBO maximization.

    Every minibatch takes one Adam step on all network parameters; when
    ``closed_form`` is on, the root-layer parameters (or the covariate
    coefficients) are instead refreshed once per epoch from the posterior
    statistics collected during that epoch.

    Returns
    -------
    (PlnTree, family, TrainReport)
    """
    config = config or TrainConfig()
    if model is None or fam is None:
        model, fam = build(data, model_arch, fam_arch, config)
    C = data.covariates if (config.covariates and model.B is not None) else None
    skip = _first_layer_params(model, config)
    params = [p for p in list(model.parameters()) + list(fam.parameters()) if id(p) not in skip]
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    gen = make_generator(config.seed + 2)
    n = len(data)
    d0 = model.dims[0]
    report = TrainReport()
    batches_all = make_batch(model, data.layers, C)
    t0 = time.perf_counter()
    bad = 0
    best, stale = -math.inf, 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        m_acc = np.zeros((config.n_mc, n, d0))
        S_acc = np.zeros((config.n_mc, n, d0))
        epoch_vals = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = _take(batches_all, idx)
            try:
                value, T, draw = elbo_estimate(model, fam, batch, config.n_mc, gen,
                                               offset_weight=config.offset_weight,
                                               return_terms=True)
            except (NonFiniteElbo, np.linalg.LinAlgError) as exc:
                log.warning("iteration %d: %s", len(report.elbo_trace), exc)
                value = None
            if value is None or not math.isfinite(value.item()):
                bad += 1
                report.elbo_trace.append(float("nan"))
                report.wall_ms.append((time.perf_counter() - t0) * 1e3)
                if bad >= 2:
                    report.epochs_run = epoch + 1
                    report.checksum = params_checksum(model, fam)
                    raise TrainingDiverged(report)
                continue
            bad = 0
            grads = ad.gradients(-value, params)
            if not opt.step(grads):
                report.rejected_steps += 1
            report.elbo_trace.append(value.item())
            report.wall_ms.append((time.perf_counter() - t0) * 1e3)
            epoch_vals.append(value.item() * len(idx))
            m_acc[:, idx] = draw.m[0].detach().numpy()
            S_acc[:, idx] = draw.S[0].detach().numpy()
        if config.closed_form:
            cov = None if batches_all.cov is None else batches_all.cov.numpy()
            apply_closed_form(model, m_acc, S_acc, cov)
        report.epoch_elbo.append(sum(epoch_vals) / n)
        report.epochs_run = epoch + 1
        if progress is not None:
            progress(epoch, report.epoch_elbo[-1])
        if config.patience is not None:
            ma = report.moving_average(config.window)
            if ma.size:
                if ma[-1] > best + config.tol * abs(best if math.isfinite(best) else 1.0):
                    best, stale = ma[-1], 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        report.converged = True
                        break
    report.checksum = params_checksum(model, fam)
    return model, fam, report


def _take(batch: Batch, idx) -> Batch:
    t = torch.as_tensor(np.asarray(idx), dtype=torch.int64)
    pick = lambda xs: [x.index_select(0, t) for x in xs]
    cov = None if batch.cov is None else batch.cov.index_select(0, t)
    return Batch(pick(batch.X), pick(batch.logX), pick(batch.seq), cov,
                 batch.log_total.index_select(0, t))


# -- importance sampling --------------------------------------------------------------


def importance_logZ(model: PlnTree, fam, layers, n_particles=1000, seed=0, covariates=None,
                    proposal="variational"):
    """Importance-sampling estimate of ``log p(X)`` per sample with its standard error.

    ``proposal`` is ``"variational"`` (the family) or ``"prior"``. Only small
    trees are accepted (at most 16 free latent coordinates).

    Returns
    -------
    (estimate, se) : arrays of shape (n,)
    """
    if sum(model.dims) > MAX_IS_DIM:
        raise ValueError(f"importance sampling is limited to {MAX_IS_DIM} latent dimensions")
    batch = make_batch(model, layers, covariates)
    n = batch.n
    gen = make_generator(seed)
    with torch.no_grad():
        if proposal == "variational":
            draw = fam.sample(batch, n_particles, gen)
            Z = [model.full(l, draw.z[l]) for l in range(model.tree.n_layers)]
            logw = log_prior(model, Z, batch.cov) - draw.logq
        elif proposal == "prior":
            Z = _prior_draws(model, n_particles, n, gen, batch.cov)
            logw = torch.zeros(n_particles, n, dtype=DTYPE)
        else:
            raise ValueError("proposal must be 'variational' or 'prior'")
        O = None
        if model.offset is not None:
            m_o, s2_o = fam.offset_params(batch)
            O = m_o + torch.sqrt(s2_o) * torch.randn((n_particles, n), generator=gen, dtype=DTYPE)
            logw = logw + model.offset.log_prob(O) - diag_gauss_logpdf(
                O.unsqueeze(-1), m_o.unsqueeze(-1), s2_o.unsqueeze(-1))
        logw = logw + log_emission(model.tree, batch.X, Z, O)
    lw = logw.numpy()
    mx = lw.max(axis=0)
    w = np.exp(lw - mx)
    mean_w = w.mean(axis=0)
    est = mx + np.log(mean_w)
    se = w.std(axis=0, ddof=1) / (math.sqrt(n_particles) * mean_w)
    ess = w.sum(axis=0) ** 2 / (w ** 2).sum(axis=0)
    if np.any(ess < 10):
        warnings.warn(f"importance sampling effective sample size down to {ess.min():.1f}",
                      RuntimeWarning, stacklevel=2)
    return est, se


def _prior_draws(model, R, n, gen, cov):
    d0 = model.dims[0]
    mean = model.first_mean(cov)
    z = mean + torch.randn((R, n, d0), generator=gen, dtype=DTYPE) @ model.sigma1_factor().T
    Z = [model.full(0, z)]
    for l in range(1, model.tree.n_layers):
        if model.dims[l] == 0:
            Z.append(torch.zeros((R, n, model.tree.layer_sizes[l]), dtype=DTYPE))
            z = z.new_zeros((R, n, 0))
            continue
        mean, L = model.transition(l, z, cov)
        eps = torch.randn((R, n, model.dims[l]), generator=gen, dtype=DTYPE)
        z = mean + (L @ eps.unsqueeze(-1)).squeeze(-1)
        Z.append(model.full(l, z))
    return Z
