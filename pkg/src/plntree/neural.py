"""Neural building blocks: MLPs, recurrent embedders, bounded outputs, Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .autodiff import DTYPE

log = logging.getLogger(__name__)

ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu, "softplus": nn.functional.softplus}


def make_generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def _uniform(shape, bound, gen):
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


class Linear(nn.Module):
    """Affine map initialized uniformly in ``±1/sqrt(fan_in)``."""

    def __init__(self, in_dim, out_dim, gen=None):
        super().__init__()
        gen = gen if gen is not None else make_generator(0)
        bound = 1.0 / math.sqrt(in_dim) if in_dim > 0 else 0.0
        self.weight = nn.Parameter(_uniform((out_dim, in_dim), bound, gen))
        self.bias = nn.Parameter(_uniform((out_dim,), bound, gen))

    def forward(self, x):
        return x @ self.weight.T + self.bias


@dataclass
class MlpSpec:
    input_dim: int
    output_dim: int
    n_hidden_layers: int = 1
    hidden_width: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        if self.n_hidden_layers < 0:
            raise ValueError("n_hidden_layers must be >= 0")
        if self.input_dim < 0 or self.output_dim <= 0 or self.hidden_width <= 0:
            raise ValueError("MLP widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class Mlp(nn.Module):
    """Fully connected network; no activation after the last layer."""

    def __init__(self, spec: MlpSpec, gen=None):
        super().__init__()
        self.spec = spec
        dims = [spec.input_dim] + [spec.hidden_width] * spec.n_hidden_layers + [spec.output_dim]
        self.layers = nn.ModuleList(Linear(a, b, gen) for a, b in zip(dims[:-1], dims[1:]))
        self._act = ACTIVATIONS[spec.activation]

    def forward(self, x):
        if x.shape[-1] != self.spec.input_dim:
            raise ValueError(f"MLP expects {self.spec.input_dim} input columns, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x


def mlp_forward(spec: MlpSpec, params: Mlp, x):
    return params(x)


@dataclass
class GruSpec:
    input_dim: int
    hidden_size: int = 32
    n_stacked_layers: int = 3
    embedding_dim: int = 120
    cell: str = "gru"

    def __post_init__(self):
        if self.hidden_size <= 0 or self.embedding_dim <= 0 or self.n_stacked_layers <= 0:
            raise ValueError("recurrent sizes must be positive")
        if self.cell not in ("gru", "lstm"):
            raise ValueError("cell must be 'gru' or 'lstm'")


class _GruCell(nn.Module):
    def __init__(self, in_dim, hidden, gen):
        super().__init__()
        self.ih = Linear(in_dim, 3 * hidden, gen)
        self.hh = Linear(hidden, 3 * hidden, gen)
        self.hidden = hidden

    def forward(self, x, state):
        h = state
        gi = self.ih(x)
        gh = self.hh(h)
        ir, iz, inn = gi.chunk(3, dim=-1)
        hr, hz, hn = gh.chunk(3, dim=-1)
        r = torch.sigmoid(ir + hr)
        z = torch.sigmoid(iz + hz)
        n = torch.tanh(inn + r * hn)
        h = (1.0 - z) * n + z * h
        return h, h

    def init_state(self, batch_shape):
        return torch.zeros(batch_shape + (self.hidden,), dtype=DTYPE)


class _LstmCell(nn.Module):
    def __init__(self, in_dim, hidden, gen):
        super().__init__()
        self.ih = Linear(in_dim, 4 * hidden, gen)
        self.hh = Linear(hidden, 4 * hidden, gen)
        self.hidden = hidden

    def forward(self, x, state):
        h, c = state
        i, f, g, o = (self.ih(x) + self.hh(h)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, (h, c)

    def init_state(self, batch_shape):
        z = torch.zeros(batch_shape + (self.hidden,), dtype=DTYPE)
        return (z, z.clone())


class RecurrentEmbedder(nn.Module):
    """Stacked GRU (or LSTM) followed by a linear map to the embedding size."""

    def __init__(self, spec: GruSpec, gen=None):
        super().__init__()
        gen = gen if gen is not None else make_generator(0)
        self.spec = spec
        cell = _GruCell if spec.cell == "gru" else _LstmCell
        dims = [spec.input_dim] + [spec.hidden_size] * spec.n_stacked_layers
        self.cells = nn.ModuleList(cell(a, spec.hidden_size, gen) for a in dims[:-1])
        self.head = Linear(spec.hidden_size, spec.embedding_dim, gen)

    def forward(self, sequence):
        """Embeddings ``E^1..E^T`` of every prefix of ``sequence``.

        ``sequence`` is a list of tensors of shape (…, input_dim); element
        ``l`` of the result only depends on ``sequence[:l + 1]``.
        """
        if len(sequence) == 0:
            raise ValueError("cannot encode an empty sequence")
        batch = sequence[0].shape[:-1]
        states = [c.init_state(batch) for c in self.cells]
        out = []
        for x in sequence:
            if x.shape[-1] != self.spec.input_dim:
                raise ValueError(f"embedder expects width {self.spec.input_dim}, got {x.shape[-1]}")
            h = x
            for j, cell in enumerate(self.cells):
                h, states[j] = cell(h, states[j])
            out.append(self.head(h))
        return out


def gru_encode(spec: GruSpec, params: RecurrentEmbedder, sequence):
    """Embedding of the whole sequence (the last prefix)."""
    return params(sequence)[-1]


@dataclass(frozen=True)
class TemperedSigmoid:
    """``B(x) = m + (M - m) * sigmoid(s * (x - (m + M) / 2))``."""

    m: float
    M: float
    s: float = 1.0

    def __post_init__(self):
        if not self.m < self.M:
            raise ValueError("lower bound must be below the upper bound")
        if not self.s > 0:
            raise ValueError("slope must be positive")

    @classmethod
    def unit_slope(cls, m, M):
        """Slope chosen so that ``B`` has derivative 1 at the midpoint."""
        return cls(m, M, 4.0 / (M - m))

    def __call__(self, x):
        return bound(self, x)

    def inverse(self, y):
        """Pre-activation giving output ``y`` (for initializing biases)."""
        p = (y - self.m) / (self.M - self.m)
        if torch.is_tensor(p):
            return (self.m + self.M) / 2 + torch.logit(p) / self.s
        return (self.m + self.M) / 2 + math.log(p / (1 - p)) / self.s


def bound(ts: TemperedSigmoid, x):
    y = ts.m + (ts.M - ts.m) * torch.sigmoid(ts.s * (x - (ts.m + ts.M) / 2))
    lo = math.nextafter(ts.m, ts.M)
    hi = math.nextafter(ts.M, ts.m)
    return torch.clamp(y, lo, hi)


MEAN_BOUNDS = (-100.0, 25.0)
VAR_BOUNDS = (1e-8, 10.0)


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction over a list of tensors updated in place.

    A step with any non-finite gradient is rejected: parameters and moments
    are left untouched and :meth:`step` returns ``False``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.rejected = 0

    def step(self, grads=None) -> bool:
        if grads is None:
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter is required")
        if not all(bool(torch.isfinite(g).all()) for g in grads):
            self.rejected += 1
            log.warning("Adam step rejected: non-finite gradient")
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        with torch.no_grad():
            for p, g, m, v in zip(self.params, grads, self.m, self.v):
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))
        return True

    def state_dict(self):
        return {"t": self.t, "m": [m.clone() for m in self.m], "v": [v.clone() for v in self.v]}


def adam_step(state: Adam, params, grads) -> bool:
    if state.params is not params and list(state.params) != list(params):
        raise ValueError("Adam state was built for other parameters")
    return state.step(grads)
