"""Message-passing encoder emitting the per-layer feature stack, plus the
motif feature encoder that pools fragment atoms on top of a vocabulary
embedding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .molgraph import ELEMENTS, MolGraph, MotifSet, MotifVocabulary, StructMatrices

_ELEM_INDEX = {sym: i for i, sym in enumerate(ELEMENTS)}
DEGREE_BUCKETS = 6  # degrees >= 5 share the last bucket

# Self-loop weight of the diagnostic averaging operator; light self-weighting
# mixes fast enough that eight rounds visibly collapse node features.
MEAN_SELF_WEIGHT = 0.1


@dataclass
class EncoderConfig:
    layers: int = 6
    dim: int = 64
    epsilon_learnable: bool = True
    seed: int = 0
    aggregation: str = "sum"  # "mean" is the over-smoothing diagnostic variant


def uniform_param(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class GraphEncoder:
    """Stack of GIN-style layers: h <- LN(W2 silu(W1 ((1+eps) h + sum_N h))).

    The optional mean-aggregation mode bypasses the per-layer MLP and applies
    repeated closed-neighborhood averaging to the (random) input embeddings,
    isolating the aggregation operator whose collapse the feature-similarity
    diagnostic measures. It is never used by the trained model.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.layers < 1 or cfg.dim < 2:
            raise ValueError(f"need layers >= 1 and dim >= 2, got {cfg.layers}, {cfg.dim}")
        if cfg.aggregation not in ("sum", "mean"):
            raise ValueError(f"unknown aggregation {cfg.aggregation!r}")
        self.cfg = cfg
        d = cfg.dim
        self.elem_table = uniform_param(rng, (len(ELEMENTS), d), d)
        self.arom_table = uniform_param(rng, (2, d), d)
        self.deg_table = uniform_param(rng, (DEGREE_BUCKETS, d), d)
        self.layers = []
        for _ in range(cfg.layers):
            layer = {
                "w1": uniform_param(rng, (d, d), d),
                "b1": uniform_param(rng, (d,), d),
                "w2": uniform_param(rng, (d, d), d),
                "b2": uniform_param(rng, (d,), d),
                "ln_g": Tensor(np.ones(d), requires_grad=True),
                "ln_b": Tensor(np.zeros(d), requires_grad=True),
            }
            if cfg.epsilon_learnable:
                layer["eps"] = Tensor(np.zeros((1, 1)), requires_grad=True)
            self.layers.append(layer)

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "embed.element": self.elem_table,
            "embed.aromatic": self.arom_table,
            "embed.degree": self.deg_table,
        }
        for l, layer in enumerate(self.layers):
            for name, tensor in layer.items():
                params[f"layer{l}.{name}"] = tensor
        return params

    def feature_ids(self, g: MolGraph) -> tuple[list[int], list[int], list[int]]:
        elem = [_ELEM_INDEX[a.element] for a in g.atoms]
        arom = [int(a.aromatic) for a in g.atoms]
        deg = [min(a.degree, DEGREE_BUCKETS - 1) for a in g.atoms]
        return elem, arom, deg

    def init_node_features(self, g: MolGraph) -> Tensor:
        elem, arom, deg = self.feature_ids(g)
        h = ad.embedding_lookup(self.elem_table, elem)
        h = h + ad.embedding_lookup(self.arom_table, arom)
        return h + ad.embedding_lookup(self.deg_table, deg)

    def encode(self, g: MolGraph, mats: StructMatrices) -> list[Tensor]:
        """All layer outputs H^(1)..H^(L), each n_atoms x dim."""
        h = self.init_node_features(g)
        if self.cfg.aggregation == "mean":
            closed = mats.adjacency + MEAN_SELF_WEIGHT * np.eye(g.n_atoms)
            agg = Tensor(closed / closed.sum(axis=1, keepdims=True))
        else:
            agg = Tensor(mats.adjacency.astype(np.float64))
        outputs = []
        for layer in self.layers:
            if self.cfg.aggregation == "mean":
                h = agg @ h
            else:
                neighbors = agg @ h
                if "eps" in layer:
                    pre = (h * (layer["eps"] + Tensor(1.0))) + neighbors
                else:
                    pre = h + neighbors
                z = ad.silu(pre @ layer["w1"] + layer["b1"])
                h = ad.layernorm_rows(
                    z @ layer["w2"] + layer["b2"], layer["ln_g"], layer["ln_b"]
                )
            outputs.append(h)
        return outputs


class MotifEncoder:
    """Per-fragment features: vocabulary embedding + pooled node features."""

    def __init__(self, dim: int, vocab_size: int, rng: np.random.Generator):
        self.dim = dim
        self.motif_table = uniform_param(rng, (vocab_size, dim), dim)
        self.w_pool = uniform_param(rng, (dim, dim), dim)
        self.b_pool = uniform_param(rng, (dim,), dim)
        self.ln_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln_b = Tensor(np.zeros(dim), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "motif.table": self.motif_table,
            "motif.w_pool": self.w_pool,
            "motif.b_pool": self.b_pool,
            "motif.ln_g": self.ln_g,
            "motif.ln_b": self.ln_b,
        }

    def encode(self, m: MotifSet, vocab: MotifVocabulary, h_last: Tensor) -> Tensor:
        """One row per fragment; unknown keys fall back to the UNK embedding."""
        ids = [vocab.lookup(key) for key in m.keys]
        emb = ad.embedding_lookup(self.motif_table, ids)
        pooled_rows = []
        for frag in m.fragments:
            pooled = ad.mean_pool(ad.gather_rows(h_last, list(frag)))
            pooled_rows.append(ad.reshape(pooled, (1, self.dim)))
        pooled_mat = ad.concat_rows(pooled_rows)
        return ad.layernorm_rows(
            emb + (pooled_mat @ self.w_pool + self.b_pool), self.ln_g, self.ln_b
        )


@dataclass
class HierarchicalFeatures:
    """Per-layer node feature matrices plus the motif feature block."""

    layers: list[Tensor]
    motif: Tensor

    def __post_init__(self):
        for i, h in enumerate(self.layers):
            if not np.isfinite(h.data).all():
                raise ValueError(f"non-finite features at layer {i + 1}")
        if not np.isfinite(self.motif.data).all():
            raise ValueError("non-finite motif features")
