"""Hierarchical count modeling with tree-structured Poisson log-normal models.

Submodules
----------
hierarchy      trees, compositional count datasets and their CSV formats
autodiff       numerically guarded linear algebra on top of torch
neural         MLPs, recurrent embedders, tempered sigmoids, Adam
model          the PLN-Tree generative model, sampling and densities
variational    backward and mean-field amortized posteriors
training       ELBO, closed-form updates, training loop, importance sampling
features       identifiable latent features and CLR transforms
diversity      alpha/beta diversity, transport distances, permutation tests
baselines      Markov-Dirichlet generator, flat PLN and SPiEC-Easi baselines
modelfile      versioned JSON model files
cli            command-line entry point
"""

from .hierarchy import HierarchicalDataset, TreeLayout, load_tree, parse_tree
from .model import ModelArch, PlnTree, generate
from .training import TrainConfig, train
from .variational import BackwardArch, MeanFieldArch, encode

__all__ = [
    "BackwardArch",
    "HierarchicalDataset",
    "MeanFieldArch",
    "ModelArch",
    "PlnTree",
    "TrainConfig",
    "TreeLayout",
    "encode",
    "generate",
    "load_tree",
    "parse_tree",
    "train",
]

__version__ = "0.1.0"
