"""Layered trees and hierarchical count data.

A tree with ``L`` layers is described by its layer sizes ``K_1..K_L`` and, for
every layer below the first, the parent index of each node. Nodes are indexed
from 0 inside each layer. Counts on the tree must satisfy the compositionality
constraint: every internal node carries the sum of its children's counts.

File formats
------------
Tree (JSON)::

    {"layer_sizes": [K1, ..., KL],
     "parents": [[p(2,0), ..., p(2,K2-1)], ..., [p(L,0), ...]]}

Hierarchical counts (CSV)::

    sample_id,L1_0,...,L1_{K1-1},L2_0,...,LL_{KL-1}

Leaf-only counts (CSV)::

    sample_id,X_0,...,X_{KL-1}

Covariates (CSV)::

    sample_id,c_0,...,c_{p-1}
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class TreeError(ValueError):
    """Malformed tree description."""


class CountsError(ValueError):
    """Counts that do not fit the tree."""


class CompositionalityError(CountsError):
    """A node count differs from the sum of its children."""

    def __init__(self, layer: int, node: int, expected: int, found: int, sample=None):
        self.layer = layer
        self.node = node
        self.expected = expected
        self.found = found
        self.sample = sample
        where = f" in sample {sample}" if sample is not None else ""
        super().__init__(
            f"compositionality violated at layer {layer}, node {node}{where}: "
            f"children sum to {expected} but node holds {found}"
        )


@dataclass(frozen=True, eq=False)
class TreeLayout:
    """Rooted tree with every branch reaching depth ``L``.

    Attributes
    ----------
    layer_sizes : tuple of int
        Number of nodes ``K_l`` in each layer.
    parents : tuple of numpy.ndarray
        ``parents[l - 1][j]`` is the index in layer ``l - 1`` of the parent of
        node ``j`` of layer ``l`` (0-based layers, ``l >= 1``).
    """

    layer_sizes: tuple
    parents: tuple
    children_index: tuple = field(init=False, repr=False)
    singleton_mask: tuple = field(init=False, repr=False)

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.layer_sizes)
        if len(sizes) == 0:
            raise TreeError("a tree needs at least one layer")
        if any(k <= 0 for k in sizes):
            raise TreeError(f"layer sizes must be positive, got {list(sizes)}")
        if len(self.parents) != len(sizes) - 1:
            raise TreeError(
                f"expected {len(sizes) - 1} parent lists for {len(sizes)} layers, "
                f"got {len(self.parents)}"
            )
        parents = []
        for l, par in enumerate(self.parents, start=1):
            par = np.asarray(par)
            if par.ndim != 1 or par.shape[0] != sizes[l]:
                raise TreeError(
                    f"layer {l + 1} has {sizes[l]} nodes but {np.size(par)} parents"
                )
            if par.size and not np.issubdtype(par.dtype, np.integer):
                if not np.all(np.equal(np.mod(par, 1), 0)):
                    raise TreeError(f"non-integer parent index in layer {l + 1}")
            par = par.astype(np.int64)
            bad = np.flatnonzero((par < 0) | (par >= sizes[l - 1]))
            if bad.size:
                j = int(bad[0])
                raise TreeError(
                    f"node {j} of layer {l + 1} references parent {int(par[j])}, "
                    f"but layer {l} has {sizes[l - 1]} nodes"
                )
            par.setflags(write=False)
            parents.append(par)

        children = []
        for l in range(len(sizes) - 1):
            groups = []
            for k in range(sizes[l]):
                ch = np.flatnonzero(parents[l] == k)
                if ch.size == 0:
                    raise TreeError(
                        f"node {k} of layer {l + 1} has no child: "
                        "every branch must reach the last layer"
                    )
                ch.setflags(write=False)
                groups.append(ch)
            children.append(tuple(groups))

        singleton = [np.full(sizes[0], sizes[0] == 1)]
        for l in range(1, len(sizes)):
            counts = np.bincount(parents[l - 1], minlength=sizes[l - 1])
            singleton.append(counts[parents[l - 1]] == 1)
        for m in singleton:
            m.setflags(write=False)

        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "parents", tuple(parents))
        object.__setattr__(self, "children_index", tuple(children))
        object.__setattr__(self, "singleton_mask", tuple(singleton))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes)

    @property
    def n_leaves(self) -> int:
        return self.layer_sizes[-1]

    def latent_mask(self, layer: int) -> np.ndarray:
        """Nodes of ``layer`` (0-based) that carry a free latent coordinate.

        Roots are always free since they drive the Poisson emission; deeper
        only-children are fixed at zero because the softmax of a single
        coordinate is constant.
        """
        if layer == 0:
            return np.ones(self.layer_sizes[0], dtype=bool)
        return ~self.singleton_mask[layer]

    def latent_dims(self) -> list:
        return [int(self.latent_mask(l).sum()) for l in range(self.n_layers)]

    def sibling_groups(self, layer: int) -> list:
        """Sibling groups partitioning ``layer`` (0-based, ``layer >= 1``)."""
        return list(self.children_index[layer - 1])

    def ancestors(self, leaf: int) -> list:
        """Index of the ancestor of ``leaf`` in each layer, root first."""
        path = [int(leaf)]
        for par in reversed(self.parents):
            path.append(int(par[path[-1]]))
        return path[::-1]

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "parents": [p.tolist() for p in self.parents],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, TreeLayout):
            return NotImplemented
        return self.layer_sizes == other.layer_sizes and all(
            np.array_equal(a, b) for a, b in zip(self.parents, other.parents)
        )

    def __hash__(self):
        return hash((self.layer_sizes, tuple(tuple(p.tolist()) for p in self.parents)))


def parse_tree(text) -> TreeLayout:
    """Build a :class:`TreeLayout` from a JSON document or an equivalent dict."""
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TreeError(f"tree document is not valid JSON: {exc}") from exc
    else:
        doc = text
    if not isinstance(doc, dict):
        raise TreeError("tree document must be a JSON object")
    missing = {"layer_sizes", "parents"} - set(doc)
    if missing:
        raise TreeError(f"tree document lacks {sorted(missing)}")
    extra = set(doc) - {"layer_sizes", "parents"}
    if extra:
        raise TreeError(f"unknown keys in tree document: {sorted(extra)}")
    sizes, parents = doc["layer_sizes"], doc["parents"]
    if not isinstance(sizes, list) or not all(isinstance(k, int) for k in sizes):
        raise TreeError("layer_sizes must be a list of integers")
    if not isinstance(parents, list) or not all(isinstance(p, list) for p in parents):
        raise TreeError("parents must be a list of lists")
    for p in parents:
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in p):
            raise TreeError("parent indices must be integers")
    return TreeLayout(tuple(sizes), tuple(np.asarray(p, dtype=np.int64) for p in parents))


def load_tree(path) -> TreeLayout:
    with open(path) as fh:
        return parse_tree(fh.read())


def save_tree(tree: TreeLayout, path) -> None:
    with open(path, "w") as fh:
        fh.write(tree.to_json())
        fh.write("\n")


@dataclass(frozen=True, eq=False)
class HierarchicalCounts:
    """Counts of one sample on every layer of a tree."""

    layers: tuple

    @property
    def leaves(self) -> np.ndarray:
        return self.layers[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layers)

    def __eq__(self, other):
        if not isinstance(other, HierarchicalCounts):
            return NotImplemented
        return len(self.layers) == len(other.layers) and all(
            np.array_equal(a, b) for a, b in zip(self.layers, other.layers)
        )


def _aggregate(tree: TreeLayout, child_counts: np.ndarray, layer: int) -> np.ndarray:
    """Sum counts of ``layer`` (0-based, >= 1) into their parents, batch-wise."""
    child_counts = np.atleast_2d(child_counts)
    out = np.zeros((child_counts.shape[0], tree.layer_sizes[layer - 1]), dtype=np.int64)
    np.add.at(out.T, tree.parents[layer - 1], child_counts.T)
    return out


def _as_count_array(values, length: int, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != length:
        raise CountsError(f"{what} has length {np.size(arr)}, expected {length}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or not np.all(np.mod(arr, 1) == 0):
            raise CountsError(f"{what} must hold integer counts")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise CountsError(f"{what} has a negative entry at index {int(np.argmax(arr < 0))}")
    return arr


def validate_counts(tree: TreeLayout, counts: Sequence) -> HierarchicalCounts:
    """Check raw per-layer vectors against ``tree`` and the sum constraint.

    Raises
    ------
    CountsError
        Wrong number of layers, wrong lengths or negative entries.
    CompositionalityError
        A node whose count differs from the sum of its children; reports the
        first offending ``(layer, node)`` with 1-based numbering.
    """
    if len(counts) != tree.n_layers:
        raise CountsError(f"expected {tree.n_layers} layers of counts, got {len(counts)}")
    layers = [
        _as_count_array(c, k, f"layer {l + 1}")
        for l, (c, k) in enumerate(zip(counts, tree.layer_sizes))
    ]
    for l in range(tree.n_layers - 1):
        expected = _aggregate(tree, layers[l + 1], l + 1)[0]
        bad = np.flatnonzero(expected != layers[l])
        if bad.size:
            k = int(bad[0])
            raise CompositionalityError(l + 1, k + 1, int(expected[k]), int(layers[l][k]))
    for arr in layers:
        arr.setflags(write=False)
    return HierarchicalCounts(tuple(layers))


def lift_leaf_counts(tree: TreeLayout, leaf_counts) -> HierarchicalCounts:
    """Fill the internal layers from leaf counts by summing sibling groups."""
    leaves = _as_count_array(leaf_counts, tree.n_leaves, "leaf counts")
    layers = lift_leaf_array(tree, leaves[None, :])
    out = []
    for arr in layers:
        arr = arr[0].copy()
        arr.setflags(write=False)
        out.append(arr)
    return HierarchicalCounts(tuple(out))


def lift_leaf_array(tree: TreeLayout, leaves: np.ndarray) -> list:
    """Batched lifting: ``(n, K_L)`` leaves to a list of ``(n, K_l)`` arrays."""
    leaves = np.asarray(leaves, dtype=np.int64)
    if leaves.ndim != 2 or leaves.shape[1] != tree.n_leaves:
        raise CountsError(f"leaf array must have shape (n, {tree.n_leaves})")
    if np.any(leaves < 0):
        raise CountsError("leaf counts must be nonnegative")
    layers = [leaves]
    for l in range(tree.n_layers - 1, 0, -1):
        layers.append(_aggregate(tree, layers[-1], l))
    return layers[::-1]


class HierarchicalDataset:
    """A collection of samples on one tree, stored layer-wise.

    Parameters
    ----------
    tree : TreeLayout
    layers : list of array_like
        ``layers[l]`` has shape ``(n, K_l)``.
    sample_ids : list of str, optional
    covariates : array_like, optional
        ``(n, p)`` real covariates.
    validate : bool
        Check the compositionality constraint on every sample.
    """

    def __init__(self, tree, layers, sample_ids=None, covariates=None, validate=True):
        self.tree = tree
        if len(layers) != tree.n_layers:
            raise CountsError(f"expected {tree.n_layers} layers, got {len(layers)}")
        arrs = []
        for l, (x, k) in enumerate(zip(layers, tree.layer_sizes)):
            x = np.asarray(x)
            if x.ndim != 2 or x.shape[1] != k:
                raise CountsError(f"layer {l + 1} must have shape (n, {k}), got {x.shape}")
            if x.size and not np.issubdtype(x.dtype, np.integer):
                if not np.all(np.mod(x, 1) == 0):
                    raise CountsError(f"layer {l + 1} must hold integer counts")
            arrs.append(np.ascontiguousarray(x, dtype=np.int64))
        n = arrs[0].shape[0]
        if any(a.shape[0] != n for a in arrs):
            raise CountsError("all layers must have the same number of samples")
        if validate:
            for l, a in enumerate(arrs):
                if np.any(a < 0):
                    i, k = np.argwhere(a < 0)[0]
                    raise CountsError(f"negative count in sample {i}, layer {l + 1}, node {k}")
            for l in range(tree.n_layers - 1):
                expected = _aggregate(tree, arrs[l + 1], l + 1)
                bad = np.argwhere(expected != arrs[l])
                if bad.size:
                    i, k = (int(v) for v in bad[0])
                    raise CompositionalityError(
                        l + 1, k + 1, int(expected[i, k]), int(arrs[l][i, k]), sample=i
                    )
        for a in arrs:
            a.setflags(write=False)
        self.layers = arrs
        if sample_ids is None:
            sample_ids = [f"s{i}" for i in range(n)]
        sample_ids = [str(s) for s in sample_ids]
        if len(sample_ids) != n:
            raise CountsError("one sample id per sample is required")
        self.sample_ids = sample_ids
        if covariates is not None:
            covariates = np.asarray(covariates, dtype=np.float64)
            if covariates.ndim != 2 or covariates.shape[0] != n:
                raise CountsError(f"covariates must have shape ({n}, p)")
        self.covariates = covariates

    @classmethod
    def from_leaves(cls, tree, leaves, sample_ids=None, covariates=None):
        return cls(tree, lift_leaf_array(tree, leaves), sample_ids, covariates, validate=False)

    @classmethod
    def from_samples(cls, tree, samples, sample_ids=None, covariates=None):
        layers = [np.stack([s.layers[l] for s in samples]) for l in range(tree.n_layers)]
        return cls(tree, layers, sample_ids, covariates)

    def __len__(self):
        return self.layers[0].shape[0]

    def __iter__(self) -> Iterator[HierarchicalCounts]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> HierarchicalCounts:
        return HierarchicalCounts(tuple(a[i] for a in self.layers))

    @property
    def samples(self) -> list:
        return list(self)

    @property
    def leaves(self) -> np.ndarray:
        return self.layers[-1]

    def subset(self, index) -> "HierarchicalDataset":
        index = np.asarray(index)
        cov = None if self.covariates is None else self.covariates[index]
        ids = [self.sample_ids[i] for i in np.arange(len(self))[index]]
        return HierarchicalDataset(self.tree, [a[index] for a in self.layers], ids, cov, False)

    def proportions(self, layer: int) -> np.ndarray:
        """Row-normalized counts of ``layer`` (0-based); all-zero rows stay zero."""
        x = self.layers[layer].astype(np.float64)
        tot = x.sum(axis=1, keepdims=True)
        return np.divide(x, tot, out=np.zeros_like(x), where=tot > 0)


def _counts_header(tree: TreeLayout) -> list:
    return ["sample_id"] + [
        f"L{l + 1}_{k}" for l, K in enumerate(tree.layer_sizes) for k in range(K)
    ]


def write_counts_csv(dataset: HierarchicalDataset, path_or_buf) -> None:
    """Write all layers of ``dataset`` in the hierarchical counts CSV layout."""
    close = False
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        fh = open(path_or_buf, "w", newline="")
        close = True
    else:
        fh = path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_counts_header(dataset.tree))
        flat = np.concatenate(dataset.layers, axis=1)
        for sid, row in zip(dataset.sample_ids, flat):
            w.writerow([sid] + [str(int(v)) for v in row])
    finally:
        if close:
            fh.close()


def _read_rows(path_or_buf):
    if isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__"):
        with open(path_or_buf, newline="") as fh:
            return list(csv.reader(fh))
    return list(csv.reader(path_or_buf))


def _parse_int_rows(rows, width, what):
    ids, values = [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width + 1:
            raise CountsError(f"{what}: line {n} has {len(row) - 1} values, expected {width}")
        ids.append(row[0])
        try:
            values.append([int(v) for v in row[1:]])
        except ValueError as exc:
            raise CountsError(f"{what}: line {n} holds a non-integer count") from exc
    return ids, np.asarray(values, dtype=np.int64).reshape(len(ids), width)


def read_counts_csv(tree: TreeLayout, path_or_buf) -> HierarchicalDataset:
    """Read a hierarchical counts CSV and validate it against ``tree``."""
    rows = _read_rows(path_or_buf)
    if not rows:
        raise CountsError("empty counts file")
    expected = _counts_header(tree)
    if rows[0] != expected:
        raise CountsError("counts header does not match the tree layout")
    ids, flat = _parse_int_rows(rows, len(expected) - 1, "counts CSV")
    bounds = np.cumsum([0] + list(tree.layer_sizes))
    layers = [flat[:, bounds[l]:bounds[l + 1]] for l in range(tree.n_layers)]
    return HierarchicalDataset(tree, layers, ids)


def read_leaf_csv(tree: TreeLayout, path_or_buf) -> HierarchicalDataset:
    """Read leaf-only counts and lift them onto ``tree``."""
    rows = _read_rows(path_or_buf)
    if not rows:
        raise CountsError("empty leaf counts file")
    expected = ["sample_id"] + [f"X_{k}" for k in range(tree.n_leaves)]
    if rows[0] != expected:
        raise CountsError("leaf counts header does not match the tree's leaf layer")
    ids, leaves = _parse_int_rows(rows, tree.n_leaves, "leaf CSV")
    if np.any(leaves < 0):
        raise CountsError("leaf counts must be nonnegative")
    return HierarchicalDataset.from_leaves(tree, leaves, ids)


def write_leaf_csv(dataset: HierarchicalDataset, path_or_buf) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id"] + [f"X_{k}" for k in range(dataset.tree.n_leaves)])
    for sid, row in zip(dataset.sample_ids, dataset.leaves):
        w.writerow([sid] + [str(int(v)) for v in row])
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(buf.getvalue())
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(buf.getvalue())


def read_covariates_csv(path_or_buf, sample_ids) -> np.ndarray:
    """Read covariates and align them on ``sample_ids``."""
    rows = _read_rows(path_or_buf)
    if not rows or rows[0][0] != "sample_id":
        raise CountsError("covariates file must start with a sample_id column")
    p = len(rows[0]) - 1
    if rows[0][1:] != [f"c_{j}" for j in range(p)]:
        raise CountsError("covariate columns must be named c_0..c_{p-1}")
    table = {}
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != p + 1:
            raise CountsError(f"covariates: line {n} has {len(row) - 1} values, expected {p}")
        table[row[0]] = [float(v) for v in row[1:]]
    missing = [s for s in sample_ids if s not in table]
    if missing:
        raise CountsError(f"no covariates for samples {missing[:5]}")
    return np.asarray([table[s] for s in sample_ids], dtype=np.float64).reshape(-1, p)
