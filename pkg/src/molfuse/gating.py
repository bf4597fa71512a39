"""Per-layer hard routing between the two specialist projectors.

Exactly one projector runs per (molecule, layer). The selected block is
scaled by (1 + p_k - stop_gradient(p_k)): the forward value is untouched
(the factor is exactly 1) while the gate parameters receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import HierarchicalFeatures, uniform_param
from .projectors import (
    CrossAttentionProjector,
    GraphMambaProjector,
    ProjectedTokens,
    fragment_gaps,
    hop_gaps_for_order,
)

ATTENTION, MAMBA = 0, 1
PROJECTOR_NAMES = ("attention", "mamba")


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class GateDecision:
    layer: int | str  # 1..L or "motif"
    probs: np.ndarray  # length-2 distribution
    selected: int  # 0 = attention, 1 = mamba


@dataclass
class RoutePins:
    """Frozen routing for finite-difference checks.

    Records every hard decision and the stop-gradient reference values of a
    base forward pass so that repeated evaluations stay on the same smooth
    branch of the loss.
    """

    hap: list[tuple[int, float]] = field(default_factory=list)  # (selected, p_k ref)
    saf: list[tuple[tuple[int, int], tuple[float, float]]] = field(default_factory=list)


@dataclass
class SequenceInput:
    """What the scan projector needs for one feature block."""

    order: list[int]
    gaps: np.ndarray


class HapRouter:
    """Gate + dispatch over E_attn / E_mamba, one decision per feature block."""

    def __init__(
        self,
        dim: int,
        attention: CrossAttentionProjector,
        mamba: GraphMambaProjector,
        rng: np.random.Generator,
        mode: str = "both",
        route_motif: bool = True,
    ):
        if mode not in ("both", "attention", "mamba"):
            raise ValueError(f"unknown projector mode {mode!r}")
        self.dim = dim
        self.attention = attention
        self.mamba = mamba
        self.mode = mode
        self.route_motif = route_motif
        self.w_g = uniform_param(rng, (2, dim), dim)
        self.b_g = uniform_param(rng, (2,), dim)
        self.gate_calls = 0

    def parameters(self) -> dict[str, Tensor]:
        return {"hap.w_g": self.w_g, "hap.b_g": self.b_g}

    def gate(self, h: Tensor) -> Tensor:
        """Probabilities over (attention, mamba): softmax(W_g mean(h) + b_g)."""
        self.gate_calls += 1
        pooled = ad.reshape(ad.mean_pool(h), (self.dim, 1))
        logits = ad.reshape(self.w_g @ pooled, (1, 2)) + self.b_g
        return ad.softmax_rows(logits)

    def select_and_project(
        self,
        h: Tensor,
        seq: SequenceInput,
        layer: int | str,
        pins: RoutePins | None = None,
        record: RoutePins | None = None,
    ) -> tuple[ProjectedTokens, GateDecision, Tensor | None]:
        """Run only the winning projector; ties route to attention.

        Returns the block, the decision record, and the live gate
        distribution (None when a projector mode is forced).
        """
        if self.mode != "both":
            selected = ATTENTION if self.mode == "attention" else MAMBA
            tokens = self._run(selected, h, seq)
            probs = np.array([1.0, 0.0]) if selected == ATTENTION else np.array([0.0, 1.0])
            decision = GateDecision(layer=layer, probs=probs, selected=selected)
            return ProjectedTokens(tokens, PROJECTOR_NAMES[selected], layer), decision, None

        p = self.gate(h)
        if pins is not None:
            idx = len(record.hap) if record is not None else 0
            selected, ref_value = pins.hap[idx]
        else:
            selected = int(np.argmax(p.data[0]))
            ref_value = float(p.data[0, selected])
        if record is not None:
            record.hap.append((selected, ref_value))

        tokens = self._run(selected, h, seq)
        p_k = ad.slice_cols(p, selected, selected + 1)
        ref = Tensor(np.array([[ref_value]])) if pins is not None else p_k.detach()
        factor = (p_k - ref) + Tensor(1.0)  # value is exactly 1
        tokens = tokens * factor
        decision = GateDecision(layer=layer, probs=p.data[0].copy(), selected=selected)
        return ProjectedTokens(tokens, PROJECTOR_NAMES[selected], layer), decision, p

    def _run(self, selected: int, h: Tensor, seq: SequenceInput) -> Tensor:
        if selected == ATTENTION:
            return self.attention.project(h)
        return self.mamba.project_sequence(ad.gather_rows(h, seq.order), seq.gaps)

    def project_all(
        self,
        hf: HierarchicalFeatures,
        node_seq: SequenceInput,
        motif_seq: SequenceInput,
        pins: RoutePins | None = None,
    ) -> tuple[list[ProjectedTokens], list[GateDecision], RoutePins, list[Tensor]]:
        """One token block per layer plus the motif pseudo-layer, in order."""
        record = RoutePins()
        blocks: list[ProjectedTokens] = []
        decisions: list[GateDecision] = []
        gate_probs: list[Tensor] = []
        for l, h in enumerate(hf.layers, start=1):
            block, decision, p = self.select_and_project(h, node_seq, l, pins, record)
            blocks.append(block)
            decisions.append(decision)
            if p is not None:
                gate_probs.append(p)
        if self.route_motif:
            block, decision, p = self.select_and_project(
                hf.motif, motif_seq, "motif", pins, record
            )
            if p is not None:
                gate_probs.append(p)
        else:
            tokens = self.attention.project(hf.motif)
            block = ProjectedTokens(tokens, "attention", "motif")
            decision = GateDecision("motif", np.array([1.0, 0.0]), ATTENTION)
        blocks.append(block)
        decisions.append(decision)
        return blocks, decisions, record, gate_probs


def gating_ratio_report(model, dataset) -> list[tuple[int | str, float]]:
    """Per layer, the fraction of molecules routed to the scan projector."""
    if not dataset:
        raise EmptyDataset("gating report needs a non-empty dataset")
    counts: dict[int | str, int] = {}
    labels: list[int | str] = []
    total = 0
    with ad.no_grad():
        for prep in dataset:
            result = model.forward(prep)
            total += 1
            for decision in result.hap_decisions:
                if decision.layer not in counts:
                    counts[decision.layer] = 0
                    labels.append(decision.layer)
                counts[decision.layer] += int(decision.selected == MAMBA)
    return [(layer, counts[layer] / total) for layer in labels]
