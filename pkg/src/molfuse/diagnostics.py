"""Analysis suite: feature-collapse curves, dispersion trends, deterministic
2-D embedding by power iteration, cluster separation, size-stratified
evaluation, and the ablation matrix. All outputs are plot-ready CSV rows."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import GraphEncoder
from .gating import EmptyDataset
from .model import Config, FusionModel, PreparedMolecule
from .molgraph import StructMatrices
from .training import evaluate, mae, split_dataset, train


def mean_pairwise_cosine(rows: np.ndarray) -> float:
    """Mean cosine similarity over all row pairs (requires >= 2 rows)."""
    n = rows.shape[0]
    if n < 2:
        raise ValueError("needs at least 2 rows")
    if np.all(rows == rows[0]):
        return 1.0
    norms = np.sqrt((rows * rows).sum(axis=1))
    norms = np.where(norms == 0.0, 1.0, norms)
    sims = (rows @ rows.T) / np.outer(norms, norms)
    upper = sims[np.triu_indices(n, k=1)]
    return float(upper.mean())


def oversmoothing_curve(
    encoder: GraphEncoder, dataset: Sequence[PreparedMolecule]
) -> list[float]:
    """Per layer, the mean over molecules of mean pairwise node cosine
    similarity. Single-atom molecules are skipped (no pairs)."""
    per_layer: list[list[float]] = [[] for _ in range(encoder.cfg.layers)]
    with ad.no_grad():
        for prep in dataset:
            if prep.n_atoms < 2:
                continue
            mats = StructMatrices(adjacency=prep.adjacency, distance=prep.distance)
            for l, h in enumerate(encoder.encode(prep.graph, mats)):
                per_layer[l].append(mean_pairwise_cosine(h.data))
    if not per_layer[0]:
        raise EmptyDataset("over-smoothing curve needs molecules with >= 2 atoms")
    return [float(np.mean(vals)) for vals in per_layer]


def molecule_vectors(
    model: FusionModel, dataset: Sequence[PreparedMolecule], layer: int, projector: str
) -> np.ndarray:
    """Molecule-level vectors: mean over one projector's tokens for a layer.

    Runs the named projector directly (ignoring the gate) so the two
    projectors can be compared on identical features.
    """
    rows = []
    with ad.no_grad():
        for prep in dataset:
            hf = model.hierarchical_features(prep)
            h = hf.layers[layer - 1]
            if projector == "attention":
                tokens = model.attention.project(h)
            elif projector == "mamba":
                tokens = model.mamba.project_sequence(
                    ad.gather_rows(h, prep.node_seq.order), prep.node_seq.gaps
                )
            else:
                raise ValueError(f"unknown projector {projector!r}")
            rows.append(tokens.data.mean(axis=0))
    return np.asarray(rows)


def dispersion(vectors: np.ndarray) -> float:
    """Mean distance to the centroid after scaling each vector to unit norm."""
    if vectors.shape[0] < 2:
        raise EmptyDataset("dispersion needs at least 2 vectors")
    norms = np.sqrt((vectors * vectors).sum(axis=1, keepdims=True))
    norms = np.where(norms == 0.0, 1.0, norms)
    unit = vectors / norms
    centroid = unit.mean(axis=0)
    return float(np.sqrt(((unit - centroid) ** 2).sum(axis=1)).mean())


def dispersion_trend(
    model: FusionModel, dataset: Sequence[PreparedMolecule], layer: int, projector: str
) -> float:
    return dispersion(molecule_vectors(model, dataset, layer, projector))


@dataclass(frozen=True)
class PcaResult:
    coords: np.ndarray  # M x 2
    components: np.ndarray  # d x 2, orthonormal unless degenerate
    degenerate: bool


def pca_embed(features: np.ndarray, seed: int = 0, tol: float = 1e-9,
              max_iter: int = 1000) -> PcaResult:
    """Project onto the top-2 principal directions via power iteration with
    deflation. Zero-variance input sets the degenerate flag and returns
    all-zero coordinates instead of raising."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("pca_embed needs at least 2 points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    total_var = float(np.trace(cov))
    d = x.shape[1]
    if total_var <= 1e-300:
        return PcaResult(np.zeros((x.shape[0], 2)), np.zeros((d, 2)), True)

    rng = np.random.default_rng(seed)
    components = np.zeros((d, 2))
    deflated = cov.copy()
    for comp in range(2):
        v = rng.normal(size=d)
        v /= np.sqrt((v * v).sum())
        for _ in range(max_iter):
            w = deflated @ v
            for prev in range(comp):  # re-orthogonalize against earlier axes
                w -= (w @ components[:, prev]) * components[:, prev]
            norm = np.sqrt((w * w).sum())
            if norm < 1e-300:
                # Remaining spectrum is (numerically) zero: pick any unit
                # direction orthogonal to what we already have.
                w = _orthogonal_fallback(components[:, :comp], d)
                norm = 1.0
            w = w / norm
            if np.sqrt(((w - v) ** 2).sum()) < tol:
                v = w
                break
            v = w
        components[:, comp] = v
        eig = float(v @ deflated @ v)
        deflated = deflated - eig * np.outer(v, v)
    return PcaResult(centered @ components, components, False)


def _orthogonal_fallback(existing: np.ndarray, d: int) -> np.ndarray:
    for i in range(d):
        w = np.zeros(d)
        w[i] = 1.0
        for j in range(existing.shape[1]):
            w -= (w @ existing[:, j]) * existing[:, j]
        norm = np.sqrt((w * w).sum())
        if norm > 1e-12:
            return w / norm
    raise RuntimeError("no orthogonal direction found")


def cluster_separation(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-class centroid distance over mean intra-class spread."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("cluster separation needs at least 2 classes")
    centroids = {c: features[labels == c].mean(axis=0) for c in classes}
    inter = [
        np.sqrt(((centroids[a] - centroids[b]) ** 2).sum())
        for i, a in enumerate(classes)
        for b in classes[i + 1 :]
    ]
    spreads = []
    for c in classes:
        member = features[labels == c]
        spreads.append(np.sqrt(((member - centroids[c]) ** 2).sum(axis=1)).mean())
    return float(np.mean(inter) / max(np.mean(spreads), 1e-12))


def fused_features(model: FusionModel, dataset: Sequence[PreparedMolecule]) -> np.ndarray:
    """Molecule-level vectors: mean over the final fused token sequence."""
    rows = []
    with ad.no_grad():
        for prep in dataset:
            rows.append(model.forward(prep).fused.data.mean(axis=0))
    return np.asarray(rows)


def size_stratified_eval(
    model: FusionModel, dataset: Sequence[PreparedMolecule], bin_width: int
) -> list[dict]:
    """Metric per half-open atom-count bin [k*w, (k+1)*w); empty bins absent."""
    if not dataset:
        raise EmptyDataset("size-stratified eval needs a non-empty dataset")
    if bin_width < 1:
        raise ValueError(f"bin width must be >= 1, got {bin_width}")
    bins: dict[int, list[PreparedMolecule]] = {}
    for prep in dataset:
        bins.setdefault(prep.n_atoms // bin_width, []).append(prep)
    rows = []
    for k in sorted(bins):
        members = bins[k]
        rows.append({
            "bin_lo": k * bin_width,
            "bin_hi": (k + 1) * bin_width,
            "n": len(members),
            "metric": evaluate(model, members),
        })
    return rows


def atom_count_histogram(dataset: Sequence[PreparedMolecule], bin_width: int) -> list[dict]:
    counts: dict[int, int] = {}
    for prep in dataset:
        k = prep.n_atoms // bin_width
        counts[k] = counts.get(k, 0) + 1
    return [
        {"bin_lo": k * bin_width, "bin_hi": (k + 1) * bin_width, "n": counts[k]}
        for k in sorted(counts)
    ]


# Table-style ablation rows: (name, projector_mode, saf_enabled).
ABLATION_VARIANTS = (
    ("attention", "attention", False),
    ("mamba", "mamba", False),
    ("attention+mamba", "both", False),
    ("attention+saf", "attention", True),
    ("mamba+saf", "mamba", True),
    ("attention+mamba+saf", "both", True),
)


def make_variant(cfg: Config, projector_mode: str, saf_enabled: bool) -> Config:
    return replace(cfg, projector_mode=projector_mode, saf_enabled=saf_enabled)


def run_ablation(
    base_cfg: Config,
    dataset: Sequence[PreparedMolecule],
    vocab,
    variants=ABLATION_VARIANTS,
) -> list[dict]:
    """Train every variant on identical splits and seed.

    Reports each run's best-epoch validation metric (the state its
    checkpoint would persist), which is far less epoch-boundary noise than
    the final-epoch model at desk scale.
    """
    train_set, val_set = split_dataset(list(dataset), base_cfg.seed)
    higher_is_better = base_cfg.task == "classification"
    rows = []
    for name, projector_mode, saf_enabled in variants:
        cfg = make_variant(base_cfg, projector_mode, saf_enabled)
        model = FusionModel(cfg, vocab)
        log = train(model, train_set, val_set, cfg)
        metrics = [r["val_metric"] for r in log]
        rows.append({
            "variant": name,
            "projectors": projector_mode,
            "saf": int(saf_enabled),
            "val_metric": max(metrics) if higher_is_better else min(metrics),
        })
    return rows


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
