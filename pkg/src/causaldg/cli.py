"""Command-line entry point: synth, train, eval, ablate, report.

Configuration is layered: preset defaults, then an optional YAML config
file, then repeatable --set key=value overrides (dotted keys), then
--seed. Every run echoes its fully resolved configuration to the output
directory so it can be reproduced byte for byte.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from importlib import resources

import numpy as np
import yaml

from . import __version__
from .benchmark import ARMS, BenchmarkConfig, benchmark_datasets, default_benchmark_model, median_drop, run_arm
from .data import SyntheticSpec, generate_synthetic, load_manifest, save_dataset, split_train_val, with_seed
from .errors import ConfigError
from .losses import LossWeights
from .metrics import ReportPair, drop, format_report_table, full_report
from .model import ModelConfig, load_checkpoint, save_checkpoint, build_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

PRESETS = {
    "desk": {
        "model": {
            "image_size": 64, "channels": 1, "n_c": 4, "n_d": 3, "h": 32,
            "backbone_width": [16, 32, 64, 64], "n_heads": 4, "n_layers": 1, "drop_prob": 0.3,
        },
        "train": {
            "learning_rate": 1e-3, "batch_size": 12, "max_epochs": 8, "patience": 3,
            "seed": 0, "ablation": [], "weights": {},
        },
        "synthetic": {
            "n_domains": 3, "n_classes": 4, "image_size": 64,
            "correlation_strength": 0.9, "seed": 0,
        },
        "benchmark": {"n_train": 2000, "n_val": 500, "n_ood": 500, "seeds": [0, 1, 2]},
        "data": {"manifest": None, "ood_manifest": None, "val_fraction": 0.2},
    },
    "paper": {
        # Full-scale protocol constants; expects real manifests and a long run.
        "model": {
            "image_size": 320, "channels": 1, "n_c": 9, "n_d": 3, "h": 64,
            "backbone_width": [16, 32, 64, 128, 128], "n_heads": 4, "n_layers": 2, "drop_prob": 0.3,
        },
        "train": {
            "learning_rate": 1e-6, "batch_size": 12, "max_epochs": 100, "patience": 5,
            "seed": 0, "ablation": [], "weights": {},
        },
        "synthetic": {
            "n_domains": 3, "n_classes": 9, "image_size": 320,
            "correlation_strength": 0.9, "seed": 0,
        },
        "benchmark": {"n_train": 2000, "n_val": 500, "n_ood": 500, "seeds": [0, 1, 2]},
        "data": {"manifest": None, "ood_manifest": None, "val_fraction": 0.2},
    },
}


def _deep_update(base: dict, overlay: dict) -> dict:
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def apply_overrides(cfg: dict, pairs) -> dict:
    """Apply repeatable --set a.b.c=value overrides (values parsed as YAML)."""
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        dotted, _, raw = pair.partition("=")
        keys = dotted.strip().split(".")
        node = cfg
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return cfg


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(PRESETS[args.preset])
    if args.config:
        with open(args.config) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config file must hold a mapping")
        _deep_update(cfg, loaded)
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["synthetic"]["seed"] = args.seed
    return cfg


def _echo_config(cfg: dict, out_dir: str, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    echo = {"command": command, "argv": sys.argv[1:], "version": __version__, "config": cfg}
    with open(os.path.join(out_dir, "config_echo.yaml"), "w") as f:
        yaml.safe_dump(echo, f, sort_keys=True)


def _model_config(cfg: dict) -> ModelConfig:
    raw = dict(cfg["model"])
    raw["backbone_width"] = tuple(raw["backbone_width"])
    return ModelConfig(**raw)


def _train_config(cfg: dict, gt_map=None) -> TrainConfig:
    raw = dict(cfg["train"])
    weights = LossWeights(**raw.pop("weights", {}))
    raw["ablation"] = frozenset(raw.get("ablation") or [])
    return TrainConfig(weights=weights, gt_map=gt_map, **raw)


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    raw = dict(cfg["synthetic"])
    for key in ("label_prevalence", "background_level", "token_intensity"):
        if key in raw and raw[key] is not None:
            raw[key] = tuple(raw[key])
    return SyntheticSpec(**raw)


def _load_datasets(cfg: dict):
    """(train, val, ood) datasets from manifests when configured, else synthetic."""
    data_cfg = cfg["data"]
    model_cfg = cfg["model"]
    if data_cfg.get("manifest"):
        pool = load_manifest(data_cfg["manifest"], image_size=model_cfg["image_size"], channels=model_cfg["channels"])
        ds_train, ds_val = split_train_val(pool, data_cfg.get("val_fraction", 0.2), seed=cfg["train"]["seed"])
        ds_ood = None
        if data_cfg.get("ood_manifest"):
            ds_ood = load_manifest(
                data_cfg["ood_manifest"], image_size=model_cfg["image_size"], channels=model_cfg["channels"]
            )
        return ds_train, ds_val, ds_ood
    spec = with_seed(_synthetic_spec(cfg), cfg["train"]["seed"])
    bench = BenchmarkConfig(**{k: tuple(v) if k == "seeds" else v for k, v in cfg["benchmark"].items()})
    return benchmark_datasets(spec, bench)


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    spec = _synthetic_spec(cfg)
    dataset = generate_synthetic(spec, args.n, args.role)
    manifest = save_dataset(dataset, args.out)
    _echo_config(cfg, args.out, "synth")
    print(f"wrote {len(dataset)} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds_train, ds_val, _ = _load_datasets(cfg)
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg)
    import torch

    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out, "train")
    checkpoint, history = train(
        model, ds_train, ds_val, train_cfg, log_path=os.path.join(args.out, "metrics.jsonl")
    )
    ckpt_path = os.path.join(args.out, "checkpoint.pt")
    save_checkpoint(model, ckpt_path, extra={"epoch": checkpoint.epoch, "val_auc": checkpoint.val_auc})
    with open(os.path.join(args.out, "history.json"), "w") as f:
        json.dump(
            {"epochs": history.epochs, "n_steps": len(history.steps)}, f, indent=2
        )
    print(f"best epoch {checkpoint.epoch} val mean AUC {checkpoint.val_auc:.4f}; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    _, ds_val, ds_ood = _load_datasets(cfg)
    if ds_ood is None:
        raise ConfigError("eval needs an OOD split: configure data.ood_manifest or use synthetic data")
    pair = full_report(model, ds_val, ds_ood, head=args.head)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out, "eval")
    pair.save_json(os.path.join(args.out, "report.json"))
    table = format_report_table(pair)
    with open(os.path.join(args.out, "report.txt"), "w") as f:
        f.write(table + "\n")
    if args.plots:
        _plot_per_class(pair, args.out)
    print(table)
    return 0


def _plot_per_class(pair: ReportPair, out_dir: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = pair.id_report.class_names
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, len(names)), 4))
    ax.bar(x - 0.2, [pair.id_report.per_class_auc[n] for n in names], width=0.4, label="ID")
    ax.bar(x + 0.2, [pair.ood_report.per_class_auc[n] for n in names], width=0.4, label="OOD")
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("AUC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "per_class_auc.png"))
    plt.close(fig)


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    spec = _synthetic_spec(cfg)
    bench = BenchmarkConfig(**{k: tuple(v) if k == "seeds" else v for k, v in cfg["benchmark"].items()})
    model_cfg = _model_config(cfg)
    base_train = _train_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(cfg, args.out, "ablate")

    results: dict[str, dict] = {arm: {} for arm in ARMS}
    for seed in bench.seeds:
        datasets = benchmark_datasets(with_seed(spec, seed), bench)
        for arm in ARMS:
            seeded = TrainConfig(
                learning_rate=base_train.learning_rate,
                batch_size=base_train.batch_size,
                max_epochs=base_train.max_epochs,
                patience=base_train.patience,
                weights=base_train.weights,
                seed=seed,
                gt_map=base_train.gt_map,
            )
            try:
                pair, _ = run_arm(arm, datasets, model_cfg, seeded)
                results[arm][seed] = pair
                print(f"arm {arm:>16} seed {seed}: drop {pair.drop_auc_percent:6.2f}% AUC")
            except Exception as err:
                logger.error("arm %s seed %s failed: %s", arm, seed, err)
                results[arm][seed] = f"error: {err}"

    payload = {
        arm: {
            str(seed): (pair.to_dict() if isinstance(pair, ReportPair) else pair)
            for seed, pair in by_seed.items()
        }
        for arm, by_seed in results.items()
    }
    payload["median_drop_auc"] = {arm: median_drop(results[arm]) for arm in ARMS}
    with open(os.path.join(args.out, "ablation.json"), "w") as f:
        json.dump(payload, f, indent=2)
    table = format_ablation_table(results)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


def format_ablation_table(results: dict) -> str:
    """Five-column comparison: mean ID/OOD AUC-AP per arm plus the drop row."""
    rows = ["id_auc", "id_ap", "ood_auc", "ood_ap", "drop_auc", "drop_ap"]
    header = f"{'row':<10}" + "".join(f"{arm:>18}" for arm in ARMS)
    lines = [header]

    def cell(arm, row):
        pairs = [p for p in results[arm].values() if isinstance(p, ReportPair)]
        if not pairs:
            return "failed"
        if row == "drop_auc":
            return f"{float(np.median([p.drop_auc_percent for p in pairs])):.2f}"
        if row == "drop_ap":
            return f"{float(np.median([p.drop_ap_percent for p in pairs])):.2f}"
        split, metric = row.split("_")
        rep = [getattr(p, "id_report" if split == "id" else "ood_report") for p in pairs]
        values = [r.mean_auc if metric == "auc" else r.mean_ap for r in rep]
        return f"{100 * float(np.mean(values)):.2f}"

    for row in rows:
        lines.append(f"{row:<10}" + "".join(f"{cell(arm, row):>18}" for arm in ARMS))
    return "\n".join(lines)


def cmd_report(args) -> int:
    if args.metrics:
        with open(args.metrics) as f:
            payload = json.load(f)
        if "id" in payload and "ood" in payload:
            print(_render_pair_dict(payload))
        else:
            print(json.dumps(payload, indent=2))
        return 0
    # Default: render the bundled full-scale reference means with recomputed drops.
    ref = json.loads(resources.files("causaldg.data").joinpath("cxr_benchmark_means.json").read_text())
    models = ref["models"]
    header = f"{'row':<10}" + "".join(f"{name:>24}" for name in models)
    lines = [header]
    for row in ("id", "ood"):
        cells = [f"{m[f'{row}_auc']:.2f}/{m[f'{row}_ap']:.2f}" for m in models.values()]
        lines.append(f"{row:<10}" + "".join(f"{c:>24}" for c in cells))
    drops = [
        f"{drop(m['id_auc'], m['ood_auc']):.2f}/{drop(m['id_ap'], m['ood_ap']):.2f}" for m in models.values()
    ]
    lines.append(f"{'drop':<10}" + "".join(f"{c:>24}" for c in drops))
    print("\n".join(lines))
    return 0


def _render_pair_dict(payload: dict) -> str:
    lines = [f"{'Finding':<16} {'ID AUC/AP':>16} {'OOD AUC/AP':>16}"]
    for name in payload["id"]["per_class_auc"]:
        lines.append(
            f"{name:<16} {100 * payload['id']['per_class_auc'][name]:7.2f}/{100 * payload['id']['per_class_ap'][name]:6.2f}"
            f" {100 * payload['ood']['per_class_auc'][name]:8.2f}/{100 * payload['ood']['per_class_ap'][name]:6.2f}"
        )
    lines.append(
        f"{'Mean':<16} {100 * payload['id']['mean_auc']:7.2f}/{100 * payload['id']['mean_ap']:6.2f}"
        f" {100 * payload['ood']['mean_auc']:8.2f}/{100 * payload['ood']['mean_ap']:6.2f}"
    )
    lines.append(f"drop {payload['drop_auc_percent']:.2f}/{payload['drop_ap_percent']:.2f} %")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causaldg", description="Train and evaluate the dual-branch causal disentanglement classifier")
    parser.add_argument("--version", action="version", version=f"causaldg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", required=out_required, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key config override")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")

    p_synth = sub.add_parser("synth", help="generate a synthetic multi-domain dataset")
    common(p_synth)
    p_synth.add_argument("--n", type=int, default=100, help="number of samples")
    p_synth.add_argument("--role", choices=["ID", "OOD"], default="ID")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on ID and OOD splits")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--head", choices=["causal", "backdoor"], default="causal")
    p_eval.add_argument("--plots", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train all ablation arms and compare drops")
    common(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="render stored metrics (default: bundled reference means)")
    common(p_report, out_required=False)
    p_report.add_argument("--metrics", help="path to a report.json/ablation.json")
    p_report.add_argument("--plots", action="store_true")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
