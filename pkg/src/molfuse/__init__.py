"""Hierarchical molecular graph encoding with adaptive projection and
top-2 expert fusion, on a small self-contained autodiff substrate."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .model import Config, FusionModel, prepare
from .molgraph import (
    MolGraph,
    MotifSet,
    MotifVocabulary,
    build_motif_vocabulary,
    fragment_motifs,
    parse_smiles,
    serialize_nodes,
    struct_matrices,
)
from .training import loss, mae, synth_targets, train

__version__ = "0.1.0"

__all__ = [
    "Config",
    "FusionModel",
    "MolGraph",
    "MotifSet",
    "MotifVocabulary",
    "Tensor",
    "backward",
    "build_motif_vocabulary",
    "finite_diff_check",
    "fragment_motifs",
    "loss",
    "mae",
    "no_grad",
    "parse_smiles",
    "prepare",
    "serialize_nodes",
    "struct_matrices",
    "synth_targets",
    "train",
]
