"""Synthetic-benchmark arms: build data, train one configuration, report drops."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .data import SyntheticSpec, generate_synthetic, split_train_val, stock_benchmark_spec, with_seed
from .errors import ConfigError
from .metrics import ReportPair, full_report
from .model import ModelConfig, PlainBaseline, build_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

ARMS = ("full", "no_CL", "no_TP", "no_domain_branch", "baseline")

_ARM_ABLATIONS = {
    "full": frozenset(),
    "no_CL": frozenset({"no_CL"}),
    "no_TP": frozenset({"no_TP"}),
    "no_domain_branch": frozenset({"no_domain_branch"}),
}


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 2000
    n_val: int = 500
    n_ood: int = 500
    seeds: tuple = (0, 1, 2)


def benchmark_datasets(spec: SyntheticSpec, bench: BenchmarkConfig):
    """ID train/val (per-domain stratified split) plus the held-out OOD set."""
    pool = generate_synthetic(spec, bench.n_train + bench.n_val, "ID")
    ds_train, ds_val = split_train_val(pool, bench.n_val / (bench.n_train + bench.n_val), seed=spec.seed)
    ds_ood = generate_synthetic(spec, bench.n_ood, "OOD")
    return ds_train, ds_val, ds_ood


def run_arm(arm: str, datasets, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Train one arm on shared datasets; returns (ReportPair, history)."""
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}, expected one of {ARMS}")
    ds_train, ds_val, ds_ood = datasets
    torch.manual_seed(train_cfg.seed)
    if arm == "baseline":
        model = PlainBaseline(model_cfg)
        cfg = train_cfg
    else:
        model = build_model(model_cfg)
        cfg = TrainConfig(
            learning_rate=train_cfg.learning_rate,
            batch_size=train_cfg.batch_size,
            max_epochs=train_cfg.max_epochs,
            patience=train_cfg.patience,
            ablation=_ARM_ABLATIONS[arm],
            weights=train_cfg.weights,
            seed=train_cfg.seed,
            gt_map=train_cfg.gt_map,
        )
    _, history = train(model, ds_train, ds_val, cfg)
    pair = full_report(model, ds_val, ds_ood)
    return pair, history


def run_benchmark(arms=ARMS, spec: SyntheticSpec | None = None, bench: BenchmarkConfig | None = None,
                  model_cfg: ModelConfig | None = None, train_cfg: TrainConfig | None = None):
    """Run the requested arms over the benchmark seeds.

    Returns {arm: {seed: ReportPair}}; arms that fail keep running the rest
    and record the error string instead of a report.
    """
    spec = spec or stock_benchmark_spec()
    bench = bench or BenchmarkConfig()
    model_cfg = model_cfg or default_benchmark_model(spec)
    train_cfg = train_cfg or TrainConfig()
    results: dict[str, dict] = {arm: {} for arm in arms}
    for seed in bench.seeds:
        datasets = benchmark_datasets(with_seed(spec, seed), bench)
        for arm in arms:
            seeded_cfg = TrainConfig(
                learning_rate=train_cfg.learning_rate,
                batch_size=train_cfg.batch_size,
                max_epochs=train_cfg.max_epochs,
                patience=train_cfg.patience,
                ablation=train_cfg.ablation,
                weights=train_cfg.weights,
                seed=seed,
                gt_map=train_cfg.gt_map,
            )
            try:
                pair, _ = run_arm(arm, datasets, model_cfg, seeded_cfg)
                results[arm][seed] = pair
                logger.info(
                    "arm %s seed %d: ID %.3f OOD %.3f drop %.2f%%",
                    arm, seed, pair.id_report.mean_auc, pair.ood_report.mean_auc, pair.drop_auc_percent,
                )
            except Exception as err:  # keep remaining arms running
                logger.error("arm %s seed %d failed: %s", arm, seed, err)
                results[arm][seed] = f"error: {err}"
    return results


def median_drop(results_for_arm: dict) -> float:
    drops = [pair.drop_auc_percent for pair in results_for_arm.values() if isinstance(pair, ReportPair)]
    if not drops:
        return float("nan")
    return float(np.median(drops))


def default_benchmark_model(spec: SyntheticSpec) -> ModelConfig:
    return ModelConfig(
        image_size=spec.image_size,
        channels=1,
        n_c=spec.n_classes,
        n_d=spec.n_domains,
        h=32,
        backbone_width=(16, 32, 64, 64),
        n_heads=4,
        n_layers=1,
    )
