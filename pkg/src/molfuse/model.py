"""Full pipeline: encoder -> per-layer routed projection -> token fusion ->
task head, plus the configuration record and per-molecule precomputation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import (
    EncoderConfig,
    GraphEncoder,
    HierarchicalFeatures,
    MotifEncoder,
    uniform_param,
)
from .gating import GateDecision, HapRouter, RoutePins, SequenceInput
from .moe import ExpertBank, FeedForwardFuser, RoutingDecision
from .molgraph import (
    MolGraph,
    MotifSet,
    MotifVocabulary,
    StructMatrices,
    fragment_motifs,
    serialize_nodes,
    struct_matrices,
)
from .projectors import (
    CrossAttentionProjector,
    GraphMambaProjector,
    ProjectedTokens,
    fragment_gaps,
    hop_gaps_for_order,
)


class InvalidToggleCombination(ValueError):
    pass


@dataclass
class Config:
    """Model and training hyperparameters; the seed fixes all randomness."""

    # model
    layers: int = 6
    dim: int = 64
    n_queries: int = 8
    heads: int = 4
    state_size: int = 8
    n_experts: int = 4
    d_ff: int = 0  # 0 -> 2 * dim
    alpha: float = 0.5
    epsilon_learnable: bool = True
    gate_balance_weight: float = 0.0  # optional routing load-balance penalty
    projector_mode: str = "both"  # "both" | "attention" | "mamba"
    saf_enabled: bool = True
    saf_mode: str = "verbatim"  # "verbatim" | "weighted"
    route_motif: bool = True
    # task
    task: str = "regression"  # "regression" | "classification" | "multilabel"
    target_width: int = 1
    target_transform: str = "none"  # "none" | "log1p" | "zscore"
    # training
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 2 * self.dim
        if self.projector_mode not in ("both", "attention", "mamba"):
            raise InvalidToggleCombination(f"bad projector mode {self.projector_mode!r}")

    @classmethod
    def from_overrides(cls, overrides: dict[str, str]) -> "Config":
        """Build from key=value strings; attention_only/mamba_only toggles map
        onto projector_mode and may not both be set."""
        kwargs: dict[str, object] = {}
        attention_only = _parse_bool(overrides.pop("attention_only", "false"))
        mamba_only = _parse_bool(overrides.pop("mamba_only", "false"))
        if attention_only and mamba_only:
            raise InvalidToggleCombination("attention_only and mamba_only both set")
        if attention_only:
            kwargs["projector_mode"] = "attention"
        elif mamba_only:
            kwargs["projector_mode"] = "mamba"
        if "saf" in overrides:
            kwargs["saf_enabled"] = _parse_bool(overrides.pop("saf"))
        valid = {f.name: f.type for f in cls.__dataclass_fields__.values()}
        for key, raw in overrides.items():
            if key not in valid:
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(cls(), key)
            if isinstance(current, bool):
                kwargs[key] = _parse_bool(raw)
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


def _parse_bool(raw: str | bool) -> bool:
    if isinstance(raw, bool):
        return raw
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass
class PreparedMolecule:
    """A molecule with every graph-derived quantity the forward pass needs."""

    graph: MolGraph
    motifs: MotifSet
    adjacency: np.ndarray
    distance: np.ndarray
    node_seq: SequenceInput
    motif_seq: SequenceInput
    targets: np.ndarray | None = None

    @property
    def n_atoms(self) -> int:
        return self.graph.n_atoms


def prepare(g: MolGraph, targets: Sequence[float] | None = None) -> PreparedMolecule:
    mats = struct_matrices(g)
    motifs = fragment_motifs(g)
    order = serialize_nodes(g, motifs)
    node_seq = SequenceInput(order=order, gaps=hop_gaps_for_order(mats.distance, order))
    motif_seq = SequenceInput(
        order=list(range(len(motifs.fragments))),
        gaps=fragment_gaps(mats.distance, motifs),
    )
    return PreparedMolecule(
        graph=g,
        motifs=motifs,
        adjacency=mats.adjacency,
        distance=mats.distance,
        node_seq=node_seq,
        motif_seq=motif_seq,
        targets=None if targets is None else np.asarray(targets, dtype=np.float64),
    )


@dataclass
class ForwardResult:
    output: Tensor  # 1 x target_width
    fused: Tensor  # M x d
    blocks: list[ProjectedTokens]
    hap_decisions: list[GateDecision]
    saf_decisions: list[RoutingDecision]
    pins: RoutePins
    gate_probs: list[Tensor]  # live gate distributions (empty if mode forced)


class FusionModel:
    """Encoder, router, fusion, and head wired together."""

    def __init__(self, cfg: Config, vocab: MotifVocabulary):
        self.cfg = cfg
        self.vocab = vocab
        rng = np.random.default_rng(cfg.seed)
        self.encoder = GraphEncoder(
            EncoderConfig(
                layers=cfg.layers,
                dim=cfg.dim,
                epsilon_learnable=cfg.epsilon_learnable,
                seed=cfg.seed,
            ),
            rng,
        )
        self.motif_encoder = MotifEncoder(cfg.dim, vocab.size, rng)
        self.attention = CrossAttentionProjector(cfg.dim, cfg.n_queries, cfg.heads, rng)
        self.mamba = GraphMambaProjector(
            cfg.dim, cfg.state_size, cfg.n_queries, cfg.alpha, rng
        )
        self.router = HapRouter(
            cfg.dim,
            self.attention,
            self.mamba,
            rng,
            mode=cfg.projector_mode,
            route_motif=cfg.route_motif,
        )
        self.expert_bank = ExpertBank(cfg.dim, cfg.n_experts, cfg.d_ff, rng, cfg.saf_mode)
        self.fuser = FeedForwardFuser(cfg.dim, cfg.d_ff, rng)
        self.head_w = uniform_param(rng, (cfg.dim, cfg.target_width), cfg.dim)
        self.head_b = uniform_param(rng, (cfg.target_width,), cfg.dim)

    def parameters(self) -> dict[str, Tensor]:
        """Only groups the configured variant actually uses."""
        params: dict[str, Tensor] = {}
        params.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        params.update(self.motif_encoder.parameters())
        if self.cfg.projector_mode in ("both", "attention") or not self.cfg.route_motif:
            params.update(self.attention.parameters())
        if self.cfg.projector_mode in ("both", "mamba"):
            params.update(self.mamba.parameters())
        if self.cfg.projector_mode == "both":
            params.update(self.router.parameters())
        if self.cfg.saf_enabled:
            params.update(self.expert_bank.parameters())
        else:
            params.update(self.fuser.parameters())
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def hierarchical_features(self, prep: PreparedMolecule) -> HierarchicalFeatures:
        mats = StructMatrices(adjacency=prep.adjacency, distance=prep.distance)
        layer_outputs = self.encoder.encode(prep.graph, mats)
        motif = self.motif_encoder.encode(prep.motifs, self.vocab, layer_outputs[-1])
        return HierarchicalFeatures(layers=layer_outputs, motif=motif)

    def forward(self, prep: PreparedMolecule, pins: RoutePins | None = None) -> ForwardResult:
        hf = self.hierarchical_features(prep)
        blocks, decisions, record, gate_probs = self.router.project_all(
            hf, prep.node_seq, prep.motif_seq, pins
        )
        if self.cfg.saf_enabled:
            fused, saf_decisions = self.expert_bank.fuse(blocks, pins, record)
        else:
            fused = self.fuser.fuse(blocks)
            saf_decisions = []
        pooled = ad.reshape(ad.mean_pool(fused), (1, self.cfg.dim))
        output = pooled @ self.head_w + self.head_b
        return ForwardResult(
            output=output,
            fused=fused,
            blocks=blocks,
            hap_decisions=decisions,
            saf_decisions=saf_decisions,
            pins=record,
            gate_probs=gate_probs,
        )

    def load_state(self, named: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, value in named.items():
            if name not in params:
                continue
            if params[name].data.shape != value.shape:
                raise ad.ShapeMismatch(
                    f"checkpoint entry {name}: {value.shape} vs {params[name].data.shape}"
                )
            params[name].data = value.astype(np.float64)
