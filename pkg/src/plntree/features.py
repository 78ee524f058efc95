"""Identifiable latent features: sibling projectors, latent proportions, CLR maps.

Latent states are lists of arrays ``Z[l]`` of shape ``(..., K_l)`` holding the
full layer (only-children included, at their fixed value). Every function
broadcasts over leading sample axes.
"""

from __future__ import annotations

import numpy as np
import torch

from .hierarchy import TreeLayout

FEATURE_KINDS = ("latent", "lp-clr", "ltp-clr", "proj-pln", "clr", "proportions")


def sibling_projector(tree: TreeLayout, layer: int) -> np.ndarray:
    """Block-diagonal projector of ``layer`` (0-based).

    Layer 0 has no siblings constraint and returns the identity; deeper
    layers have blocks ``I - 11^T / c`` for each sibling group of size ``c``.
    """
    K = tree.layer_sizes[layer]
    if layer == 0:
        return np.eye(K)
    P = np.zeros((K, K))
    for group in tree.sibling_groups(layer):
        c = group.size
        P[np.ix_(group, group)] = np.eye(c) - 1.0 / c
    return P


def global_projector(d: int) -> np.ndarray:
    """Projector onto the orthogonal complement of the ones vector in R^d."""
    return np.eye(d) - 1.0 / d


def _block_center(x, parents, n_groups):
    sums = np.zeros(x.shape[:-1] + (n_groups,))
    np.add.at(sums, (..., parents), x)
    sizes = np.bincount(parents, minlength=n_groups)
    return x - (sums / sizes)[..., parents]


def project_latents(tree: TreeLayout, Z) -> list:
    """``(Z^1, P^2 Z^2, ..., P^L Z^L)``: every sibling block centered."""
    _check(tree, Z)
    out = [np.array(Z[0], dtype=np.float64, copy=True)]
    for l in range(1, tree.n_layers):
        out.append(_block_center(np.asarray(Z[l], dtype=np.float64),
                                 tree.parents[l - 1], tree.layer_sizes[l - 1]))
    return out


def _group_softmax(z, parents, n_groups):
    zmax = np.full(z.shape[:-1] + (n_groups,), -np.inf)
    np.maximum.at(zmax, (..., parents), z)
    e = np.exp(z - zmax[..., parents])
    tot = np.zeros(z.shape[:-1] + (n_groups,))
    np.add.at(tot, (..., parents), e)
    return e / tot[..., parents]


def latent_proportions(tree: TreeLayout, Z) -> list:
    """Latent proportions ``V``: softmax at the roots, then split down the tree.

    ``V_{C(l,k)} = softmax(Z_{C(l,k)}) * V_k^l``.
    """
    _check(tree, Z)
    z0 = np.asarray(Z[0], dtype=np.float64)
    e = np.exp(z0 - z0.max(axis=-1, keepdims=True))
    V = [e / e.sum(axis=-1, keepdims=True)]
    for l in range(1, tree.n_layers):
        par = tree.parents[l - 1]
        w = _group_softmax(np.asarray(Z[l], dtype=np.float64), par, tree.layer_sizes[l - 1])
        V.append(w * V[-1][..., par])
    return V


def clr(x) -> np.ndarray:
    """Centered log-ratio ``log x - mean(log x)`` over the last axis.

    Raises
    ------
    ValueError
        On a zero or negative entry; apply a pseudocount first.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("clr needs strictly positive entries (add a pseudocount first)")
    lx = np.log(x)
    return lx - lx.mean(axis=-1, keepdims=True)


def clr_counts(counts, pseudocount: float = 1.0) -> np.ndarray:
    """CLR of observed counts after adding ``pseudocount``."""
    x = np.asarray(counts, dtype=np.float64) + pseudocount
    return clr(x / x.sum(axis=-1, keepdims=True))


def lp_clr(tree: TreeLayout, Z) -> list:
    return [clr(v) for v in latent_proportions(tree, Z)]


def ltp_clr(tree: TreeLayout, Z) -> np.ndarray:
    """LP-CLR restricted to the leaf layer."""
    return lp_clr(tree, Z)[-1]


def proj_pln(Z) -> np.ndarray:
    """Flat PLN latent vector projected onto the complement of the ones vector."""
    Z = np.asarray(Z, dtype=np.float64)
    return Z - Z.mean(axis=-1, keepdims=True)


def _check(tree, Z):
    if len(Z) != tree.n_layers:
        raise ValueError(f"expected {tree.n_layers} latent layers, got {len(Z)}")
    for l, (z, k) in enumerate(zip(Z, tree.layer_sizes)):
        if np.shape(z)[-1] != k:
            raise ValueError(f"latent layer {l + 1} must have {k} columns, got {np.shape(z)[-1]}")


class BlockCentering:
    """Torch version of the projector restricted to a layer's free coordinates.

    ``free`` indexes the non-singleton nodes of the layer; the map subtracts
    the sibling-block mean of each coordinate.
    """

    def __init__(self, tree: TreeLayout, layer: int):
        free = np.flatnonzero(tree.latent_mask(layer))
        par = tree.parents[layer - 1][free]
        _, labels = np.unique(par, return_inverse=True)
        self.n_groups = int(labels.max()) + 1 if labels.size else 0
        self.labels = torch.as_tensor(labels, dtype=torch.int64)
        sizes = np.bincount(labels, minlength=self.n_groups)
        self.inv_size = torch.as_tensor(1.0 / sizes[labels], dtype=torch.float64)

    def __call__(self, x):
        if self.n_groups == 0:
            return x
        sums = torch.zeros(x.shape[:-1] + (self.n_groups,), dtype=x.dtype)
        sums = sums.index_add(-1, self.labels, x)
        return x - sums.index_select(-1, self.labels) * self.inv_size


def feature_matrix(tree: TreeLayout, kind: str, Z=None, counts=None, pseudocount=1.0):
    """Features as one ``(n, F)`` matrix plus column names, layer-major.

    ``latent``, ``lp-clr``, ``ltp-clr`` and ``proj-pln`` need latent states;
    ``clr`` and ``proportions`` work on observed counts. ``proj-pln`` centers
    the leaf-layer latent vector (the flat PLN reading of a tree model).
    """
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; choose from {FEATURE_KINDS}")
    cols, blocks = [], []

    def add(label, l, arr):
        blocks.append(arr)
        cols.extend(f"{label}_{l + 1}_{k}" for k in range(arr.shape[-1]))

    if kind in ("clr", "proportions"):
        if counts is None:
            raise ValueError(f"{kind} features need counts")
        for l, x in enumerate(counts):
            x = np.asarray(x, dtype=np.float64)
            if kind == "clr":
                add(kind, l, clr_counts(x, pseudocount))
            else:
                tot = x.sum(axis=-1, keepdims=True)
                add(kind, l, np.divide(x, tot, out=np.zeros_like(x), where=tot > 0))
    else:
        if Z is None:
            raise ValueError(f"{kind} features need latent states")
        if kind == "latent":
            for l, z in enumerate(Z):
                add(kind, l, np.asarray(z, dtype=np.float64))
        elif kind == "lp-clr":
            for l, f in enumerate(lp_clr(tree, Z)):
                add(kind, l, f)
        elif kind == "ltp-clr":
            add(kind, tree.n_layers - 1, ltp_clr(tree, Z))
        else:
            add(kind, tree.n_layers - 1, proj_pln(Z[-1]))
    return np.concatenate(blocks, axis=-1), cols
