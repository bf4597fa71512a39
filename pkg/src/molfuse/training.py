"""Task heads, losses, the Adam optimizer, synthetic graph-derived targets,
and the training loop. Regression trains on smooth-L1 and reports MAE."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gating import EmptyDataset
from .model import Config, FusionModel, ForwardResult, PreparedMolecule, prepare
from .molgraph import MolGraph, parse_smiles, read_dataset_file, struct_matrices


class TargetWidthMismatch(ValueError):
    pass


TARGET_KINDS = ("ring_count", "wiener_index", "heavy_atom_count", "hetero_fraction")


def synth_targets(g: MolGraph, kind: str) -> float:
    """Exact graph-derived target values (no chemistry toolkit involved)."""
    if kind == "ring_count":
        return float(g.n_bonds - g.n_atoms + 1)
    if kind == "wiener_index":
        distance = struct_matrices(g).distance
        return float(np.triu(distance, k=1).sum())
    if kind == "heavy_atom_count":
        return float(g.n_atoms)
    if kind == "hetero_fraction":
        hetero = sum(1 for a in g.atoms if a.element != "C")
        return hetero / g.n_atoms
    raise ValueError(f"unknown target kind {kind!r}")


def loss(outputs: Tensor, targets: np.ndarray, kind: str) -> Tensor:
    """Scalar training loss for one molecule.

    regression: mean smooth-L1 (beta 1); classification: logistic
    cross-entropy on a single logit; multilabel: summed logistic
    cross-entropy over all columns.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(1, -1)
    if outputs.shape != targets.shape:
        raise TargetWidthMismatch(f"outputs {outputs.shape} vs targets {targets.shape}")
    t = Tensor(targets)
    if kind == "regression":
        return ad.mean_all(ad.smooth_l1(outputs - t))
    if kind in ("classification", "multilabel"):
        # BCE with logits: softplus(z) - z * y, summed over columns.
        return ad.sum_all(ad.softplus(outputs) - (outputs * t))
    raise ValueError(f"unknown loss kind {kind!r}")


def gate_balance_loss(result: ForwardResult, weight: float) -> Tensor | None:
    """Optional penalty pushing the mean routing distribution toward uniform.

    Off by default; enable via ``gate_balance_weight`` to discourage one
    projector from winning every layer.
    """
    if weight <= 0 or not result.gate_probs:
        return None
    mean_probs = ad.mean_pool(ad.concat_rows(result.gate_probs))  # (2,)
    diff = ad.reshape(mean_probs, (1, 2)) - Tensor(0.5)
    return ad.scale(ad.sum_all(diff * diff), weight)


def mae(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Mean absolute error, computed as the brute-force mean of |p - t|."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise TargetWidthMismatch(f"{predictions.shape} vs {targets.shape}")
    return float(np.mean(np.abs(predictions - targets)))


class Adam:
    """Bias-corrected Adam with global-norm gradient clipping first."""

    def __init__(self, params: dict[str, Tensor], cfg: Config):
        self.params = params
        self.lr = cfg.lr
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.clip_norm = cfg.clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        grads = {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }
        if self.clip_norm > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_norm:
                factor = self.clip_norm / total
                grads = {k: g * factor for k, g in grads.items()}
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / b1t
            v_hat = self.v[k] / b2t
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def full_model_grad_check(
    model: FusionModel,
    preps: list[PreparedMolecule],
    eps: float = 1e-5,
    max_coords_per_param: int | None = 4,
    seed: int = 0,
) -> float:
    """Finite-difference check of the whole pipeline on a small batch.

    Routing is pinned from a base forward pass (hard selections plus the
    stop-gradient reference values), so every perturbed evaluation stays on
    the same smooth branch of the loss that the tape differentiates.
    """
    pins = [model.forward(prep).pins for prep in preps]

    def batch_loss() -> Tensor:
        total: Tensor | None = None
        for prep, pin in zip(preps, pins):
            result = model.forward(prep, pins=pin)
            term = loss(result.output, prep.targets, model.cfg.task)
            total = term if total is None else total + term
        return ad.scale(total, 1.0 / len(preps))

    return ad.finite_diff_check(
        batch_loss,
        model.parameters(),
        eps=eps,
        max_coords_per_param=max_coords_per_param,
        seed=seed,
    )


@dataclass
class TargetTransform:
    """Invertible target preprocessing fitted on the training split."""

    kind: str = "none"
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, kind: str, train_targets: np.ndarray) -> "TargetTransform":
        if kind == "zscore":
            std = float(train_targets.std())
            return cls(kind, float(train_targets.mean()), std if std > 0 else 1.0)
        if kind in ("none", "log1p"):
            return cls(kind)
        raise ValueError(f"unknown target transform {kind!r}")

    def apply(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "log1p":
            return np.log1p(values)
        if self.kind == "zscore":
            return (values - self.mean) / self.std
        return values


def load_dataset(path: str, target_columns: list[int] | None = None) -> list[PreparedMolecule]:
    """Parse a dataset file into prepared molecules with selected targets."""
    out = []
    for smiles, targets in read_dataset_file(path):
        g = parse_smiles(smiles)
        if target_columns is not None:
            targets = [targets[c] for c in target_columns]
        out.append(prepare(g, targets if targets else None))
    return out


def split_dataset(
    dataset: list[PreparedMolecule], seed: int, holdout: float = 0.2
) -> tuple[list[PreparedMolecule], list[PreparedMolecule]]:
    """Seeded shuffle then holdout split (train, validation)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(len(dataset) * holdout)))
    val_idx = set(order[:n_val].tolist())
    train = [dataset[i] for i in range(len(dataset)) if i not in val_idx]
    val = [dataset[i] for i in sorted(val_idx)]
    return train, val


def evaluate(model: FusionModel, dataset: list[PreparedMolecule]) -> float:
    """MAE for regression, accuracy for classification, and MAE of the
    per-label sigmoid probabilities for multilabel heads."""
    if not dataset:
        raise EmptyDataset("evaluate needs a non-empty dataset")
    preds, targets = [], []
    with ad.no_grad():
        for prep in dataset:
            out = model.forward(prep).output.data[0]
            preds.append(out)
            targets.append(prep.targets)
    preds_arr = np.asarray(preds)
    targets_arr = np.asarray(targets)
    if model.cfg.task == "classification":
        labels = (preds_arr[:, 0] > 0).astype(np.float64)
        return float((labels == targets_arr[:, 0]).mean())
    if model.cfg.task == "multilabel":
        probs = 1.0 / (1.0 + np.exp(-preds_arr))
        return mae(probs, targets_arr)
    return mae(preds_arr, targets_arr)


def train(
    model: FusionModel,
    train_set: list[PreparedMolecule],
    val_set: list[PreparedMolecule],
    cfg: Config,
    log_path: str | None = None,
    checkpoint_path: str | None = None,
) -> list[dict]:
    """Epoch loop with seeded shuffling; keeps the best-validation checkpoint.

    Returns the per-epoch log records {epoch, train_loss, val_metric, seconds}.
    """
    if not train_set or not val_set:
        raise EmptyDataset("training needs non-empty train and validation sets")
    for prep in train_set + val_set:
        if prep.targets is None:
            raise TargetWidthMismatch("dataset record has no targets")
        if prep.targets.shape != (cfg.target_width,):
            raise TargetWidthMismatch(
                f"target width {prep.targets.shape} vs configured {cfg.target_width}"
            )
    params = model.parameters()
    optimizer = Adam(params, cfg)
    higher_is_better = cfg.task == "classification"
    best_metric = -np.inf if higher_is_better else np.inf
    log: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            model.zero_grad()
            for i in batch:
                prep = train_set[i]
                result = model.forward(prep)
                mol_loss = loss(result.output, prep.targets, cfg.task)
                epoch_loss += mol_loss.item()
                balance = gate_balance_loss(result, cfg.gate_balance_weight)
                if balance is not None:
                    mol_loss = mol_loss + balance
                ad.backward(ad.scale(mol_loss, 1.0 / len(batch)))
            optimizer.step()
        val_metric = evaluate(model, val_set)
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss / len(train_set),
            "val_metric": val_metric,
            "seconds": time.perf_counter() - started,
        }
        log.append(record)
        improved = val_metric > best_metric if higher_is_better else val_metric < best_metric
        if improved:
            best_metric = val_metric
            if checkpoint_path is not None:
                ad.save_tensors(checkpoint_path, params)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for record in log:
                fh.write(json.dumps(record) + "\n")
    return log
