"""Versioned JSON model files for PLN-Tree fits and the flat baselines.

Floats are written with Python's shortest round-trip representation, so a
save / load cycle reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .baselines import PlnBaselineParams, SpiecEasiParams
from .hierarchy import TreeLayout, parse_tree
from .model import ModelArch, PlnTree
from .variational import arch_from_dict, build_family

FORMAT_VERSION = 1
MODEL_KINDS = ("plntree", "plntree-mf", "pln", "spiec-easi")


class ModelFileError(ValueError):
    pass


def _pack(arr) -> dict:
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ModelFileError("cannot serialize non-finite parameters")
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unpack(d) -> np.ndarray:
    try:
        return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"malformed parameter entry: {e}") from e


def _state(module) -> dict:
    return {k: _pack(v.detach().numpy()) for k, v in module.state_dict().items()}


def _load_state(module, params):
    own = module.state_dict()
    missing = set(own) - set(params)
    extra = set(params) - set(own)
    if missing or extra:
        raise ModelFileError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    state = {}
    for k, v in params.items():
        arr = _unpack(v)
        if tuple(arr.shape) != tuple(own[k].shape):
            raise ModelFileError(f"{k}: shape {arr.shape} does not match {tuple(own[k].shape)}")
        state[k] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def model_document(model: PlnTree, fam=None, kind="plntree", extra=None) -> dict:
    """Model file contents; ``fam`` may be omitted for a generative-only model."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "tree": model.tree.to_dict(),
        "arch": model.arch.to_dict(),
        "variational_arch": None if fam is None else fam.arch.to_dict(),
        "offset_posterior_hidden": None if fam is None or fam.offset_net is None
        else int(fam.offset_net["m"].layers[0].weight.shape[0]),
        "params": _state(model),
        "variational_params": None if fam is None else _state(fam),
        "covariate_standardization": {"mean": [float(v) for v in model.cov_mean],
                                      "scale": [float(v) for v in model.cov_scale]},
    }
    if extra:
        doc["extra"] = extra
    return doc


def baseline_document(tree: TreeLayout, params, extra=None) -> dict:
    doc = {"format_version": FORMAT_VERSION, "tree": tree.to_dict()}
    if isinstance(params, PlnBaselineParams):
        doc["kind"] = "pln"
        doc["params"] = {"mu": _pack(params.mu), "Sigma": _pack(params.Sigma),
                         "m": _pack(params.m), "s": _pack(params.s)}
    elif isinstance(params, SpiecEasiParams):
        doc["kind"] = "spiec-easi"
        doc["params"] = {"mean": _pack(params.mean), "cov": _pack(params.cov),
                         "totals": [int(t) for t in params.totals],
                         "pseudocount": float(params.pseudocount)}
    else:
        raise TypeError(f"unsupported baseline parameters {type(params).__name__}")
    if extra:
        doc["extra"] = extra
    return doc


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save(path, doc) -> None:
    Path(path).write_text(dumps(doc))


def load_document(path_or_text) -> dict:
    if isinstance(path_or_text, str) and path_or_text.lstrip().startswith("{"):
        text = path_or_text
    else:
        text = Path(path_or_text).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFileError(f"model file is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model file (format_version must be {FORMAT_VERSION})")
    if doc.get("kind") not in MODEL_KINDS:
        raise ModelFileError(f"unknown model kind {doc.get('kind')!r}")
    return doc


def from_document(doc):
    """Rebuild the fitted object.

    Returns
    -------
    (kind, tree, obj) where ``obj`` is ``(model, family)`` for PLN-Tree fits
    (family ``None`` when the file has none) and the parameter record for
    baselines.
    """
    tree = parse_tree(doc["tree"])
    kind = doc["kind"]
    p = doc["params"]
    if kind == "pln":
        return kind, tree, PlnBaselineParams(_unpack(p["mu"]), _unpack(p["Sigma"]),
                                             _unpack(p["m"]), _unpack(p["s"]))
    if kind == "spiec-easi":
        return kind, tree, SpiecEasiParams(_unpack(p["mean"]), _unpack(p["cov"]),
                                           np.asarray(p["totals"], dtype=np.int64),
                                           float(p["pseudocount"]))
    try:
        arch = ModelArch(**doc["arch"])
        fam_arch = doc.get("variational_arch")
        fam_arch = None if fam_arch is None else arch_from_dict(fam_arch)
    except TypeError as e:
        raise ModelFileError(f"malformed architecture: {e}") from e
    model = PlnTree(tree, arch)
    _load_state(model, p)
    cs = doc.get("covariate_standardization") or {}
    model.cov_mean = np.asarray(cs.get("mean", []), dtype=np.float64)
    model.cov_scale = np.asarray(cs.get("scale", []), dtype=np.float64)
    if fam_arch is None:
        return kind, tree, (model, None)
    fam = build_family(model, fam_arch)
    if doc.get("offset_posterior_hidden"):
        fam.enable_offset(hidden=int(doc["offset_posterior_hidden"]))
    _load_state(fam, doc["variational_params"])
    return kind, tree, (model, fam)


def load(path):
    return from_document(load_document(path))
