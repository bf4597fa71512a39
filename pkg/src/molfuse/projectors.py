"""The two specialist projectors: learnable-query cross-attention and a
structure-aware selective state-space scan. Both map n x d node features to a
fixed K x d token block so downstream fusion sees uniform shapes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .molgraph import MolGraph, MotifSet, StructMatrices, serialize_nodes
from .encoder import uniform_param


@dataclass(frozen=True)
class ProjectedTokens:
    """Fixed-size token block with its provenance."""

    tokens: Tensor  # K x d
    source: str  # "attention" | "mamba"
    layer: int | str  # 1..L or "motif"


class CrossAttentionProjector:
    """K learnable query tokens attending over node representations."""

    def __init__(self, dim: int, n_queries: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.n_queries = n_queries
        self.heads = heads
        self.calls = 0
        d = dim
        self.queries = uniform_param(rng, (n_queries, d), d)
        self.w_q = uniform_param(rng, (d, d), d)
        self.b_q = uniform_param(rng, (d,), d)
        self.w_k = uniform_param(rng, (d, d), d)
        self.b_k = uniform_param(rng, (d,), d)
        self.w_v = uniform_param(rng, (d, d), d)
        self.b_v = uniform_param(rng, (d,), d)
        self.w_o = uniform_param(rng, (d, d), d)
        self.b_o = uniform_param(rng, (d,), d)
        self.ln_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_b = Tensor(np.zeros(d), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "attn.queries": self.queries,
            "attn.w_q": self.w_q, "attn.b_q": self.b_q,
            "attn.w_k": self.w_k, "attn.b_k": self.b_k,
            "attn.w_v": self.w_v, "attn.b_v": self.b_v,
            "attn.w_o": self.w_o, "attn.b_o": self.b_o,
            "attn.ln_g": self.ln_g, "attn.ln_b": self.ln_b,
        }

    def project(
        self,
        h: Tensor,
        mask: np.ndarray | None = None,
        return_weights: bool = False,
    ):
        """Multi-head cross-attention; residual + layernorm on the queries."""
        self.calls += 1
        if mask is not None and not np.asarray(mask, dtype=bool).any():
            raise ad.EmptyMask("cross-attention: all nodes masked")
        q = self.queries @ self.w_q + self.b_q
        k = h @ self.w_k + self.b_k
        v = h @ self.w_v + self.b_v
        dh = self.dim // self.heads
        head_outputs = []
        head_weights = []
        for head in range(self.heads):
            lo, hi = head * dh, (head + 1) * dh
            qh = ad.slice_cols(q, lo, hi)
            kh = ad.slice_cols(k, lo, hi)
            vh = ad.slice_cols(v, lo, hi)
            scores = ad.scale(qh @ ad.transpose(kh), 1.0 / np.sqrt(dh))
            weights = ad.softmax_rows(scores, mask)
            head_weights.append(weights.data)
            head_outputs.append(weights @ vh)
        out = ad.concat_cols(head_outputs) @ self.w_o + self.b_o
        tokens = ad.layernorm_rows(self.queries + out, self.ln_g, self.ln_b)
        if return_weights:
            return tokens, head_weights
        return tokens


class GraphMambaProjector:
    """Selective-scan projector over the fragment/degree node serialization.

    The scan's per-step decay is modulated by the hop distance between
    consecutive serialized nodes: gamma_t = 1 + alpha * (gap - 1), so jumps
    across the graph forget faster. alpha = 0 disables the structural bias.
    """

    def __init__(
        self,
        dim: int,
        state_size: int,
        n_queries: int,
        alpha: float,
        rng: np.random.Generator,
    ):
        if alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {alpha}")
        self.dim = dim
        self.state_size = state_size
        self.n_queries = n_queries
        self.alpha = alpha
        self.calls = 0
        d, s = dim, state_size
        self.w_delta = uniform_param(rng, (d, d), d)
        # Positive decay rates A = exp(a_log); rows initialized to 1..s.
        self.a_log = Tensor(
            np.log(np.tile(np.arange(1, s + 1, dtype=np.float64), (d, 1))),
            requires_grad=True,
        )
        self.w_b = uniform_param(rng, (d, s), d)
        self.w_c = uniform_param(rng, (d, s), d)
        self.skip = Tensor(np.ones((1, d)), requires_grad=True)
        self.ln_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_b = Tensor(np.zeros(d), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "mamba.w_delta": self.w_delta,
            "mamba.a_log": self.a_log,
            "mamba.w_b": self.w_b,
            "mamba.w_c": self.w_c,
            "mamba.skip": self.skip,
            "mamba.ln_g": self.ln_g,
            "mamba.ln_b": self.ln_b,
        }

    def scan(self, x_seq: Tensor, hop_gaps: np.ndarray | list[int]) -> Tensor:
        """Linear-time selective scan; one output row per input row.

        Per channel c with state vector S_c: delta = softplus(W_delta x_t),
        Abar = exp(-delta_c * A_c * gamma_t), S_c <- Abar * S_c +
        delta_c * x_tc * B_t, y_tc = C_t . S_c + D_c * x_tc, with
        B_t = W_B x_t and C_t = W_C x_t shared across channels.
        """
        n = x_seq.shape[0]
        gaps = np.asarray(hop_gaps, dtype=np.float64)
        if gaps.shape != (max(n - 1, 0),):
            raise ad.ShapeMismatch(f"scan: {n} rows need {n - 1} gaps, got {gaps.shape}")
        d, s = self.dim, self.state_size
        a = ad.exp(self.a_log)  # d x s, strictly positive
        state: Tensor | None = None
        rows = []
        for t in range(n):
            x_t = ad.gather_rows(x_seq, [t])  # 1 x d
            delta = ad.softplus(x_t @ self.w_delta)  # 1 x d
            b_t = x_t @ self.w_b  # 1 x s
            c_t = x_t @ self.w_c  # 1 x s
            gamma = 1.0 if t == 0 else 1.0 + self.alpha * (gaps[t - 1] - 1.0)
            decay = ad.exp(ad.scale(ad.reshape(delta, (d, 1)) * a, -gamma))  # d x s
            inject = ad.reshape(delta * x_t, (d, 1)) @ b_t  # d x s
            state = inject if state is None else (decay * state) + inject
            y_t = ad.reshape(state @ ad.reshape(c_t, (s, 1)), (1, d)) + (x_t * self.skip)
            rows.append(y_t)
        return ad.concat_rows(rows)

    def project_sequence(self, x_seq: Tensor, hop_gaps: np.ndarray | list[int]) -> Tensor:
        """Scan, then pool into exactly K tokens.

        The sequence is split into K contiguous segments as equal as possible
        (earlier segments take the remainder); each segment is mean-pooled.
        Shorter-than-K sequences repeat the final pooled token to fill.
        """
        self.calls += 1
        y = self.scan(x_seq, hop_gaps)
        n = y.shape[0]
        k = self.n_queries
        bounds = segment_bounds(n, k)
        pooled = [
            ad.reshape(ad.mean_pool(ad.gather_rows(y, list(range(lo, hi)))), (1, self.dim))
            for lo, hi in bounds
        ]
        stacked = ad.concat_rows(pooled)
        if len(bounds) < k:
            fill = list(range(len(bounds))) + [len(bounds) - 1] * (k - len(bounds))
            stacked = ad.gather_rows(stacked, fill)
        return ad.layernorm_rows(stacked, self.ln_g, self.ln_b)

    def project_graph(self, h: Tensor, g: MolGraph, m: MotifSet,
                      mats: StructMatrices | None = None) -> Tensor:
        """Convenience wrapper: serialize nodes, derive hop gaps, project."""
        from .molgraph import struct_matrices

        if mats is None:
            mats = struct_matrices(g)
        order = serialize_nodes(g, m)
        gaps = hop_gaps_for_order(mats.distance, order)
        return self.project_sequence(ad.gather_rows(h, order), gaps)


def segment_bounds(n: int, k: int) -> list[tuple[int, int]]:
    """Split 0..n into at most k contiguous segments, earlier ones larger."""
    if n <= k:
        return [(i, i + 1) for i in range(n)]
    base, rem = divmod(n, k)
    bounds = []
    lo = 0
    for i in range(k):
        hi = lo + base + (1 if i < rem else 0)
        bounds.append((lo, hi))
        lo = hi
    return bounds


def hop_gaps_for_order(distance: np.ndarray, order: list[int]) -> np.ndarray:
    """Hop distance between consecutive nodes of a serialization order."""
    if len(order) < 2:
        return np.zeros(0, dtype=np.int64)
    idx = np.asarray(order)
    return distance[idx[:-1], idx[1:]]


def fragment_gaps(distance: np.ndarray, m: MotifSet) -> np.ndarray:
    """Minimum hop distance between consecutive fragments (canonical order).

    Used when the motif feature block is routed through the scan projector:
    each fragment row is one sequence step.
    """
    frags = m.fragments
    if len(frags) < 2:
        return np.zeros(0, dtype=np.int64)
    gaps = []
    for a, b in zip(frags[:-1], frags[1:]):
        sub = distance[np.ix_(list(a), list(b))]
        gaps.append(int(sub.min()))
    return np.asarray(gaps, dtype=np.int64)
