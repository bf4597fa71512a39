"""Token-wise sparse top-2 mixture of experts over the projected blocks.

Verbatim mode sums the two selected expert outputs (each with unit-forward
straight-through gate scaling); weighted mode renormalizes the two gate
probabilities instead. Unselected experts are never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import uniform_param
from .gating import RoutePins
from .projectors import ProjectedTokens


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class RoutingDecision:
    probs: np.ndarray  # distribution over the N experts
    pair: tuple[int, int]  # two distinct selected indices


class ExpertBank:
    """N independent two-layer feed-forward experts plus a linear gate."""

    def __init__(
        self,
        dim: int,
        n_experts: int,
        d_ff: int,
        rng: np.random.Generator,
        mode: str = "verbatim",
    ):
        if n_experts < 2:
            raise ValueError(f"need at least 2 experts, got {n_experts}")
        if mode not in ("verbatim", "weighted"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.dim = dim
        self.n_experts = n_experts
        self.mode = mode
        self.w_gate = uniform_param(rng, (n_experts, dim), dim)
        self.experts = []
        for _ in range(n_experts):
            self.experts.append({
                "w1": uniform_param(rng, (dim, d_ff), dim),
                "b1": uniform_param(rng, (d_ff,), dim),
                "w2": uniform_param(rng, (d_ff, dim), d_ff),
                "b2": uniform_param(rng, (dim,), d_ff),
            })
        self.eval_counts = np.zeros(n_experts, dtype=np.int64)
        self.gate_calls = 0

    def parameters(self) -> dict[str, Tensor]:
        params = {"saf.w_gate": self.w_gate}
        for i, expert in enumerate(self.experts):
            for name, tensor in expert.items():
                params[f"saf.expert{i}.{name}"] = tensor
        return params

    def route(self, z: Tensor) -> tuple[Tensor, RoutingDecision]:
        """Softmax gate over experts; top-2 with ties broken by lower index."""
        self.gate_calls += 1
        probs = ad.softmax_rows(z @ ad.transpose(self.w_gate))  # 1 x N
        ranked = np.argsort(-probs.data[0], kind="stable")
        pair = (int(ranked[0]), int(ranked[1]))
        return probs, RoutingDecision(probs=probs.data[0].copy(), pair=pair)

    def _expert_forward(self, i: int, z: Tensor) -> Tensor:
        self.eval_counts[i] += 1
        e = self.experts[i]
        return ad.silu(z @ e["w1"] + e["b1"]) @ e["w2"] + e["b2"]

    def fuse_token(
        self,
        z: Tensor,
        pins: RoutePins | None = None,
        record: RoutePins | None = None,
    ) -> tuple[Tensor, RoutingDecision]:
        probs, decision = self.route(z)
        if pins is not None:
            idx = len(record.saf) if record is not None else 0
            pair, refs = pins.saf[idx]
            decision = RoutingDecision(probs=probs.data[0].copy(), pair=pair)
        else:
            pair = decision.pair
            refs = tuple(float(probs.data[0, i]) for i in pair)
        if record is not None:
            record.saf.append((pair, refs))

        if self.mode == "weighted":
            p_a = ad.slice_cols(probs, pair[0], pair[0] + 1)
            p_b = ad.slice_cols(probs, pair[1], pair[1] + 1)
            denom = p_a + p_b
            out = (self._expert_forward(pair[0], z) * ad.div(p_a, denom)) + (
                self._expert_forward(pair[1], z) * ad.div(p_b, denom)
            )
            return out, decision

        terms = []
        for i, ref_value in zip(pair, refs):
            p_i = ad.slice_cols(probs, i, i + 1)
            ref = Tensor(np.array([[ref_value]])) if pins is not None else p_i.detach()
            factor = (p_i - ref) + Tensor(1.0)  # value is exactly 1
            terms.append(self._expert_forward(i, z) * factor)
        return terms[0] + terms[1], decision

    def fuse(
        self,
        blocks: list[ProjectedTokens],
        pins: RoutePins | None = None,
        record: RoutePins | None = None,
    ) -> tuple[Tensor, list[RoutingDecision]]:
        """Flatten the blocks to M tokens and fuse each independently."""
        if not blocks:
            raise EmptyInput("fuse: no token blocks")
        flat = ad.concat_rows([b.tokens for b in blocks])
        rows = []
        decisions = []
        for j in range(flat.shape[0]):
            out, decision = self.fuse_token(ad.gather_rows(flat, [j]), pins, record)
            rows.append(out)
            decisions.append(decision)
        return ad.concat_rows(rows), decisions


class FeedForwardFuser:
    """SAF-off replacement: one shared MLP applied to every token."""

    def __init__(self, dim: int, d_ff: int, rng: np.random.Generator):
        self.w1 = uniform_param(rng, (dim, d_ff), dim)
        self.b1 = uniform_param(rng, (d_ff,), dim)
        self.w2 = uniform_param(rng, (d_ff, dim), d_ff)
        self.b2 = uniform_param(rng, (dim,), d_ff)

    def parameters(self) -> dict[str, Tensor]:
        return {"fuser.w1": self.w1, "fuser.b1": self.b1,
                "fuser.w2": self.w2, "fuser.b2": self.b2}

    def fuse(self, blocks: list[ProjectedTokens]) -> Tensor:
        if not blocks:
            raise EmptyInput("fuse: no token blocks")
        flat = ad.concat_rows([b.tokens for b in blocks])
        return ad.silu(flat @ self.w1 + self.b1) @ self.w2 + self.b2


def expert_load_histogram(model, dataset) -> np.ndarray:
    """Selection counts per expert over every token of a dataset."""
    from .gating import EmptyDataset

    if not dataset:
        raise EmptyDataset("expert load histogram needs a non-empty dataset")
    counts = np.zeros(model.expert_bank.n_experts, dtype=np.int64)
    with ad.no_grad():
        for prep in dataset:
            result = model.forward(prep)
            for decision in result.saf_decisions:
                for i in decision.pair:
                    counts[i] += 1
    return counts
