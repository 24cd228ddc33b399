"""End-to-end optimization loop: losses, early stopping, ablation switches."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.optim import Adam

from .data import ImageDataset, make_batches
from .errors import ConfigError, ContractError, NumericError
from .intervention import InterventionConfig, intervene
from .losses import LossWeights, assemble_total, batch_contrastive, ce_disease, ce_domain, kl_uniform
from .metrics import split_report
from .model import DualBranchModel
from .prior import causality_map, normalize_embeddings, prior_loss
from .relational import rs_loss

logger = logging.getLogger(__name__)

ABLATIONS = ("no_CL", "no_TP", "no_domain_branch")

# Terms silenced by each ablation switch; no_domain_branch also skips the
# domain-branch forward pass entirely.
ABLATION_MASKS = {
    "no_CL": ("rs", "batch_y_same", "batch_y_diff", "batch_d_same", "batch_d_diff"),
    "no_TP": ("prior",),
    "no_domain_branch": (
        "ce_d", "kl_d", "bd_d", "rs",
        "batch_y_same", "batch_y_diff", "batch_d_same", "batch_d_diff",
    ),
}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 12
    max_epochs: int = 10
    patience: int = 3
    ablation: frozenset = frozenset()
    weights: LossWeights = LossWeights()
    seed: int = 0
    gt_map: object = None  # n_c x n_c ndarray; defaults to the all-base map

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation switches: {sorted(unknown)}")


def effective_weights(weights: LossWeights, ablation) -> LossWeights:
    masked = weights
    for switch in sorted(ablation):
        masked = masked.with_zeroed(ABLATION_MASKS[switch])
    return masked


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]
    wall_time: float


@dataclass
class History:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


@dataclass
class Checkpoint:
    """Best-validation snapshot returned by train()."""

    params: dict
    epoch: int
    val_auc: float


def _derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def collate(dataset: ImageDataset, indices):
    images = torch.from_numpy(dataset.images[indices])
    labels = torch.from_numpy(dataset.disease_labels[indices])
    domains = torch.from_numpy(dataset.domain_labels[indices])
    return images, labels, domains


def predict_scores(model, dataset: ImageDataset, head: str = "causal", batch_size: int = 128) -> np.ndarray:
    """Disease-class probabilities over a whole dataset (evaluation mode)."""
    chunks = []
    for start in range(0, len(dataset), batch_size):
        images = torch.from_numpy(dataset.images[start : start + batch_size])
        chunks.append(model.predict_disease(images, head=head))
    return np.concatenate(chunks, axis=0)


def evaluate_epoch(model, dataset_val: ImageDataset) -> float:
    """Macro-mean AUC of the causal disease head on the validation split."""
    if len(dataset_val) == 0:
        raise ContractError("validation dataset is empty")
    scores = predict_scores(model, dataset_val)
    report = split_report(scores, dataset_val.disease_labels, dataset_val.class_names, "val")
    return report.mean_auc


def _dual_branch_parts(model: DualBranchModel, images, y, d, active, run_domain, seed, step, gt_map):
    out_y, out_d = model(images, run_domain=run_domain)
    batch = images.shape[0]
    parts = dict.fromkeys(active, 0.0)

    if active["ce_y"]:
        parts["ce_y"] = ce_disease(out_y.logits_causal, y)
    if active["kl_y"]:
        parts["kl_y"] = kl_uniform(out_y.logits_spurious, "disease")
    if active["bd_y"]:
        q_bd = intervene(
            out_y.q_causal, out_y.q_spurious,
            InterventionConfig(model.cfg.drop_prob, rng_seed=_derived_seed(seed, step, 0)),
        )
        parts["bd_y"] = ce_disease(model.disease.causal_logits(q_bd), y)
    if run_domain:
        if active["ce_d"]:
            parts["ce_d"] = ce_domain(out_d.logits_causal, d)
        if active["kl_d"]:
            parts["kl_d"] = kl_uniform(out_d.logits_spurious, "domain")
        if active["bd_d"]:
            q_bd_d = intervene(
                out_d.q_causal, out_d.q_spurious,
                InterventionConfig(model.cfg.drop_prob, rng_seed=_derived_seed(seed, step, 1)),
            )
            parts["bd_d"] = ce_domain(model.domain.causal_logits(q_bd_d), d)
        if active["rs"]:
            scores = model.scorer.score_pairs(out_y.q_causal, out_y.q_spurious, out_d.q_causal, out_d.q_spurious)
            parts["rs"] = rs_loss(scores)
        if batch >= 2:
            if active["batch_d_same"]:
                parts["batch_d_same"] = batch_contrastive(out_d.q_causal, d, "same")
            if active["batch_d_diff"]:
                parts["batch_d_diff"] = batch_contrastive(out_d.q_spurious, d, "diff")
    if batch >= 2:
        if active["batch_y_same"]:
            parts["batch_y_same"] = batch_contrastive(out_y.q_causal, y, "same")
        if active["batch_y_diff"]:
            parts["batch_y_diff"] = batch_contrastive(out_y.q_spurious, y, "diff")
    if active["prior"]:
        maps = causality_map(normalize_embeddings(out_y.q_causal))
        parts["prior"] = prior_loss(maps, gt_map)
    return parts


def train(model, dataset_train: ImageDataset, dataset_val: ImageDataset, cfg: TrainConfig,
          log_path=None, step_callback=None):
    """Optimize the model end to end; returns (best checkpoint, history).

    Per step: forward both branches, intervene, compute every active loss
    term, and take one Adam step on the weighted total. Validation
    mean AUC is computed each epoch; training stops early after
    cfg.patience epochs without improvement and the best-validation
    parameters are restored into the model.
    """
    if len(dataset_train) == 0:
        raise ContractError("training dataset is empty")
    torch.manual_seed(cfg.seed)
    weights = effective_weights(cfg.weights, cfg.ablation)
    active = {name: w > 0 for name, w in weights.as_term_map().items()}
    run_domain = "no_domain_branch" not in cfg.ablation and isinstance(model, DualBranchModel)
    if cfg.gt_map is not None:
        gt_map = torch.as_tensor(np.asarray(cfg.gt_map), dtype=torch.float32)
    else:
        # No declared relations: the prior regresses every entry to the base level.
        gt_map = torch.full((model.cfg.n_c, model.cfg.n_c), 0.5)

    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    history = History()
    best = Checkpoint(params=copy.deepcopy(model.state_dict()), epoch=-1, val_auc=float("nan"))
    best_auc = -float("inf")
    stale = 0
    step = 0
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            model.train()
            epoch_total = 0.0
            n_batches = 0
            for indices in make_batches(dataset_train, cfg.batch_size, _derived_seed(cfg.seed, epoch)):
                images, y, d = collate(dataset_train, indices)
                t0 = time.perf_counter()
                if isinstance(model, DualBranchModel):
                    parts = _dual_branch_parts(model, images, y, d, active, run_domain, cfg.seed, step, gt_map)
                else:
                    parts = dict.fromkeys(active, 0.0)
                    if active["ce_y"]:
                        parts["ce_y"] = ce_disease(model(images), y)
                try:
                    bundle = assemble_total(parts, weights)
                except NumericError as err:
                    raise NumericError(f"step {step}: {err}") from err
                optimizer.zero_grad()
                if torch.is_tensor(bundle.total) and bundle.total.requires_grad:
                    bundle.total.backward()
                if step_callback is not None:
                    step_callback(model, step, bundle)
                optimizer.step()
                record = StepRecord(step=step, losses=bundle.to_record(), wall_time=time.perf_counter() - t0)
                history.steps.append(record)
                if log_file:
                    log_file.write(json.dumps({"step": step, **record.losses}) + "\n")
                epoch_total += record.losses["total"]
                n_batches += 1
                step += 1
            val_auc = evaluate_epoch(model, dataset_val)
            history.epochs.append(
                {"epoch": epoch, "val_auc": val_auc, "mean_total": epoch_total / max(n_batches, 1)}
            )
            if val_auc > best_auc:
                best_auc = val_auc
                best = Checkpoint(params=copy.deepcopy(model.state_dict()), epoch=epoch, val_auc=val_auc)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    logger.info("early stop at epoch %d (best %.4f at epoch %d)", epoch, best_auc, best.epoch)
                    break
    finally:
        if log_file:
            log_file.close()
    if best.epoch >= 0:
        model.load_state_dict(best.params)
    return best, history
