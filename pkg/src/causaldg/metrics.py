"""Ranking metrics (AUC, average precision) and the ID->OOD drop report.

AUC uses the Mann-Whitney formulation (ties count 1/2), AP the
step-interpolated precision/recall sum over the score-descending ranking.
Both are checked against brute-force oracles in the test suite.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, MetricUndefinedError

logger = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties get half credit. Raises MetricUndefinedError unless both label
    values are present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores/labels must be equal-length 1-D, got {s.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(s, method="average")
    # Mann-Whitney U statistic from the positive rank-sum.
    u = float(np.sum(ranks[y == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """AP = sum_k precision@k * delta-recall@k over the descending ranking."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores/labels must be equal-length 1-D, got {s.shape} vs {y.shape}")
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise MetricUndefinedError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = np.asarray(y[order] == 1, dtype=np.float64)
    cum_hits = np.cumsum(hits)
    precision_at_k = cum_hits / np.arange(1, len(s) + 1)
    # delta-recall is 1/n_pos exactly at the positive ranks, 0 elsewhere.
    return float(np.sum(precision_at_k * hits) / n_pos)


def drop(id_mean: float, ood_mean: float) -> float:
    """Relative ID->OOD degradation in percent: 100 * (ID - OOD) / ID."""
    if id_mean <= 0:
        raise ContractError(f"drop undefined for id_mean={id_mean} (must be > 0)")
    return 100.0 * (id_mean - ood_mean) / id_mean


@dataclass
class EvalReport:
    """Per-class and mean AUC/AP for one split. Undefined classes hold NaN."""

    split: str
    class_names: list[str]
    per_class_auc: dict[str, float] = field(default_factory=dict)
    per_class_ap: dict[str, float] = field(default_factory=dict)
    mean_auc: float = float("nan")
    mean_ap: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "per_class_auc": self.per_class_auc,
            "per_class_ap": self.per_class_ap,
            "mean_auc": self.mean_auc,
            "mean_ap": self.mean_ap,
        }


@dataclass
class ReportPair:
    """ID and OOD reports plus the relative drop between their means."""

    id_report: EvalReport
    ood_report: EvalReport
    drop_auc_percent: float
    drop_ap_percent: float

    def to_dict(self) -> dict:
        return {
            "id": self.id_report.to_dict(),
            "ood": self.ood_report.to_dict(),
            "drop_auc_percent": self.drop_auc_percent,
            "drop_ap_percent": self.drop_ap_percent,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def split_report(scores: np.ndarray, labels: np.ndarray, class_names: list[str], split: str) -> EvalReport:
    """Per-class AUC/AP over score matrix batch x n_c; degenerate classes excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"score/label shape mismatch: {scores.shape} vs {labels.shape}")
    report = EvalReport(split=split, class_names=list(class_names))
    for c, name in enumerate(class_names):
        try:
            report.per_class_auc[name] = auc(scores[:, c], labels[:, c])
        except MetricUndefinedError:
            logger.warning("class %r has degenerate labels on %s split, AUC excluded", name, split)
            report.per_class_auc[name] = float("nan")
        try:
            report.per_class_ap[name] = average_precision(scores[:, c], labels[:, c])
        except MetricUndefinedError:
            logger.warning("class %r has no positives on %s split, AP excluded", name, split)
            report.per_class_ap[name] = float("nan")
    report.mean_auc = float(np.nanmean(list(report.per_class_auc.values())))
    report.mean_ap = float(np.nanmean(list(report.per_class_ap.values())))
    return report


def full_report(model, dataset_id, dataset_ood, head: str = "causal") -> ReportPair:
    """Evaluate a trained model on both splits and compute the relative drop.

    `model` needs a predict_disease(images, head=...) method returning
    per-class scores; predictions come from the causal head unless
    `head="backdoor"` selects the intervened head instead.
    """
    from .training import predict_scores  # deferred: avoids import cycle

    reports = []
    for split, ds in (("ID", dataset_id), ("OOD", dataset_ood)):
        if len(ds) == 0:
            raise ContractError(f"{split} dataset is empty")
        scores = predict_scores(model, ds, head=head)
        reports.append(split_report(scores, ds.disease_labels, ds.class_names, split))
    id_rep, ood_rep = reports
    return ReportPair(
        id_report=id_rep,
        ood_report=ood_rep,
        drop_auc_percent=drop(id_rep.mean_auc, ood_rep.mean_auc),
        drop_ap_percent=drop(id_rep.mean_ap, ood_rep.mean_ap),
    )


def format_report_table(pair: ReportPair) -> str:
    """Aligned text table: one row per class, mean row, and the drop row."""
    names = pair.id_report.class_names
    width = max([len(n) for n in names] + [12])
    lines = [f"{'Finding':<{width}}  {'ID AUC/AP':>15}  {'OOD AUC/AP':>15}"]
    for n in names:
        id_a, id_p = pair.id_report.per_class_auc[n], pair.id_report.per_class_ap[n]
        ood_a, ood_p = pair.ood_report.per_class_auc[n], pair.ood_report.per_class_ap[n]
        lines.append(
            f"{n:<{width}}  {100 * id_a:7.2f}/{100 * id_p:7.2f}  {100 * ood_a:7.2f}/{100 * ood_p:7.2f}"
        )
    lines.append(
        f"{'Mean':<{width}}  {100 * pair.id_report.mean_auc:7.2f}/{100 * pair.id_report.mean_ap:7.2f}"
        f"  {100 * pair.ood_report.mean_auc:7.2f}/{100 * pair.ood_report.mean_ap:7.2f}"
    )
    lines.append(f"{'ID-OOD drop':<{width}}  {pair.drop_auc_percent:7.2f}/{pair.drop_ap_percent:7.2f} %")
    return "\n".join(lines)
