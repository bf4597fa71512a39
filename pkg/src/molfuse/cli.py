"""Command-line entry point.

Subcommands: gen-data, train, eval, diagnose, gating-report, ablate,
grad-check. Metric files land under --out; exit code 0 on success, 2 on
usage errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diagnostics as diag
from .datagen import generate_dataset, has_benzene_ring, write_dataset
from .encoder import EncoderConfig, GraphEncoder
from .gating import gating_ratio_report
from .moe import expert_load_histogram
from .model import Config, FusionModel, prepare
from .molgraph import MotifVocabulary, build_motif_vocabulary, parse_smiles
from .training import (
    TargetTransform,
    evaluate,
    full_model_grad_check,
    load_dataset,
    split_dataset,
    train,
)

# Config-file keys consumed by the CLI itself rather than by Config.
_CLI_KEYS = ("target_cols", "vocab_min_freq", "holdout", "bin_width")


def read_config_file(path: str) -> dict[str, str]:
    """key=value lines; blank lines and # comments ignored."""
    overrides: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _load_overrides(args) -> dict[str, str]:
    overrides = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return overrides


def _split_cli_keys(overrides: dict[str, str]) -> dict[str, str]:
    return {k: overrides.pop(k) for k in list(overrides) if k in _CLI_KEYS}


def _target_cols(cli_cfg: dict[str, str]) -> list[int]:
    raw = cli_cfg.get("target_cols", "0")
    return [int(x) for x in raw.split(",") if x != ""]


def _prepare_data(args, cfg: Config, cli_cfg: dict[str, str]):
    dataset = load_dataset(args.dataset, _target_cols(cli_cfg))
    vocab = build_motif_vocabulary(
        (prep.graph for prep in dataset), int(cli_cfg.get("vocab_min_freq", "1"))
    )
    return dataset, vocab


def _apply_transform(dataset, cfg: Config, train_split) -> TargetTransform:
    if cfg.target_transform == "none":
        return TargetTransform()
    train_targets = np.concatenate([p.targets for p in train_split])
    transform = TargetTransform.fit(cfg.target_transform, train_targets)
    for prep in dataset:
        prep.targets = transform.apply(prep.targets)
    return transform


def _load_model_dir(model_dir: str) -> FusionModel:
    root = Path(model_dir)
    cfg = Config.from_overrides(read_config_file(str(root / "config.txt")))
    vocab = MotifVocabulary.load(str(root / "vocab.json"))
    model = FusionModel(cfg, vocab)
    model.load_state(ad.load_tensors(str(root / "best.ckpt")))
    return model


def _save_model_dir(out: Path, cfg: Config, vocab: MotifVocabulary) -> None:
    lines = [f"{k}={getattr(cfg, k)}" for k in cfg.__dataclass_fields__]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    vocab.save(str(out / "vocab.json"))


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    lines = generate_dataset(args.n, seed, args.max_atoms)
    write_dataset(str(out / "dataset.tsv"), lines)
    print(f"wrote {len(lines)} molecules to {out / 'dataset.tsv'}")
    return 0


def cmd_train(args) -> int:
    overrides = _load_overrides(args)
    cli_cfg = _split_cli_keys(overrides)
    cfg = Config.from_overrides(overrides)
    dataset, vocab = _prepare_data(args, cfg, cli_cfg)
    train_set, val_set = split_dataset(dataset, cfg.seed, float(cli_cfg.get("holdout", "0.2")))
    _apply_transform(dataset, cfg, train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = FusionModel(cfg, vocab)
    log = train(
        model, train_set, val_set, cfg,
        log_path=str(out / "train_log.jsonl"),
        checkpoint_path=str(out / "best.ckpt"),
    )
    _save_model_dir(out, cfg, vocab)
    print(f"final val_metric={log[-1]['val_metric']:.6f} over {cfg.epochs} epochs")
    return 0


def cmd_eval(args) -> int:
    overrides = _load_overrides(args)
    cli_cfg = _split_cli_keys(overrides)
    model = _load_model_dir(args.model_dir)
    dataset = load_dataset(args.dataset, _target_cols(cli_cfg))
    if model.cfg.target_transform != "none":
        _apply_transform(dataset, model.cfg, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bin_width = int(cli_cfg.get("bin_width", "20"))
    rows = diag.size_stratified_eval(model, dataset, bin_width)
    diag.write_csv(
        str(out / "strata.csv"),
        ("bin_lo", "bin_hi", "n", "metric"),
        [(r["bin_lo"], r["bin_hi"], r["n"], f"{r['metric']:.10g}") for r in rows],
    )
    hist = diag.atom_count_histogram(dataset, bin_width)
    diag.write_csv(
        str(out / "atoms_hist.csv"),
        ("bin_lo", "bin_hi", "n"),
        [(r["bin_lo"], r["bin_hi"], r["n"]) for r in hist],
    )
    print(f"overall metric={evaluate(model, dataset):.6f}")
    return 0


def cmd_diagnose(args) -> int:
    overrides = _load_overrides(args)
    cli_cfg = _split_cli_keys(overrides)
    cfg = Config.from_overrides(overrides)
    dataset, vocab = _prepare_data(args, cfg, cli_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    # Feature-collapse premise: deep random encoder with mean aggregation.
    probe = GraphEncoder(
        EncoderConfig(layers=8, dim=cfg.dim, seed=cfg.seed, aggregation="mean"),
        np.random.default_rng(cfg.seed),
    )
    curve = diag.oversmoothing_curve(probe, dataset)
    diag.write_csv(
        str(out / "oversmoothing.csv"),
        ("layer", "cos_sim"),
        [(l + 1, f"{v:.10g}") for l, v in enumerate(curve)],
    )

    model = FusionModel(cfg, vocab)
    rows = []
    for projector in ("attention", "mamba"):
        for layer in (1, cfg.layers):
            value = diag.dispersion_trend(model, dataset, layer, projector)
            rows.append((layer, projector, f"{value:.10g}"))
    diag.write_csv(str(out / "dispersion.csv"), ("layer", "projector", "dispersion"), rows)

    features = diag.fused_features(model, dataset)
    labels = np.array([int(has_benzene_ring(p.graph)) for p in dataset])
    embedding = diag.pca_embed(features, seed=cfg.seed)
    diag.write_csv(
        str(out / "embed.csv"),
        ("id", "x", "y", "label"),
        [
            (i, f"{xy[0]:.10g}", f"{xy[1]:.10g}", int(labels[i]))
            for i, xy in enumerate(embedding.coords)
        ],
    )
    if len(np.unique(labels)) >= 2:
        print(f"cluster separation (benzene vs rest): "
              f"{diag.cluster_separation(features, labels):.6f}")
    return 0


def cmd_gating_report(args) -> int:
    overrides = _load_overrides(args)
    cli_cfg = _split_cli_keys(overrides)
    if args.model_dir:
        model = _load_model_dir(args.model_dir)
        dataset = load_dataset(args.dataset, _target_cols(cli_cfg))
    else:
        cfg = Config.from_overrides(overrides)
        dataset, vocab = _prepare_data(args, cfg, cli_cfg)
        model = FusionModel(cfg, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = gating_ratio_report(model, dataset)
    diag.write_csv(
        str(out / "gating.csv"),
        ("layer", "mamba_ratio"),
        [(layer, f"{ratio:.10g}") for layer, ratio in report],
    )
    if model.cfg.saf_enabled:
        counts = expert_load_histogram(model, dataset)
        diag.write_csv(
            str(out / "experts.csv"),
            ("expert_id", "count"),
            list(enumerate(counts.tolist())),
        )
    return 0


def cmd_ablate(args) -> int:
    overrides = _load_overrides(args)
    cli_cfg = _split_cli_keys(overrides)
    cfg = Config.from_overrides(overrides)
    dataset, vocab = _prepare_data(args, cfg, cli_cfg)
    train_split, _ = split_dataset(dataset, cfg.seed)
    _apply_transform(dataset, cfg, train_split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = diag.run_ablation(cfg, dataset, vocab)
    diag.write_csv(
        str(out / "ablation.csv"),
        ("variant", "projectors", "saf", "val_metric"),
        [(r["variant"], r["projectors"], r["saf"], f"{r['val_metric']:.10g}") for r in rows],
    )
    for r in rows:
        print(f"{r['variant']}: val_metric={r['val_metric']:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    overrides = _load_overrides(args)
    _split_cli_keys(overrides)
    # Small dimensions keep the check fast; every parameter group is present.
    overrides.setdefault("layers", "3")
    overrides.setdefault("dim", "8")
    overrides.setdefault("heads", "2")
    overrides.setdefault("n_queries", "4")
    overrides.setdefault("state_size", "4")
    overrides.setdefault("n_experts", "3")
    cfg = Config.from_overrides(overrides)
    smiles = ("CC(=O)Oc1ccccc1", "CCN(CC)CC", "C1CCCCC1O")
    graphs = [prepare(parse_smiles(s), [0.5]) for s in smiles]
    vocab = build_motif_vocabulary((p.graph for p in graphs))
    model = FusionModel(cfg, vocab)
    error = full_model_grad_check(model, graphs, max_coords_per_param=4, seed=cfg.seed)
    print(f"max relative error: {error:.3e}")
    return 0 if error < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="molfuse")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, dataset_required=True):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        if dataset_required:
            p.add_argument("--dataset", required=True, help="dataset file path")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p, dataset_required=False)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--max-atoms", type=int, default=40)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="size-stratified evaluation of a trained model")
    common(p)
    p.add_argument("--model-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="feature-collapse, dispersion, embedding")
    common(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("gating-report", help="per-layer routing frequencies")
    common(p)
    p.add_argument("--model-dir", default=None)
    p.set_defaults(fn=cmd_gating_report)

    p = sub.add_parser("ablate", help="train and compare architecture variants")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model")
    common(p, dataset_required=False)
    p.set_defaults(fn=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure -> exit 1, message on stderr
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
