"""Per-branch and batch-contrastive loss terms, and the weighted total.

Every term is a nonnegative quantity to minimize. Probabilities are clamped
to [1e-12, 1] inside logs so saturated predictions stay finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Mapping

import torch
import torch.nn.functional as F

from .embeddings import FeatureEmbedding
from .errors import ConfigError, ContractError, NumericError

PROB_FLOOR = 1e-12

# Order matches the weight indices: lambda_i weights TERM_NAMES[i-1].
TERM_NAMES = (
    "ce_y", "kl_y", "bd_y",
    "ce_d", "kl_d", "bd_d",
    "rs",
    "batch_y_same", "batch_y_diff",
    "batch_d_same", "batch_d_diff",
    "prior",
)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the twelve loss terms (all default 1.0)."""

    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_3: float = 1.0
    lambda_4: float = 1.0
    lambda_5: float = 1.0
    lambda_6: float = 1.0
    lambda_7: float = 1.0
    lambda_8: float = 1.0
    lambda_9: float = 1.0
    lambda_10: float = 1.0
    lambda_11: float = 1.0
    lambda_12: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0):
                raise ConfigError(f"{f.name} must be >= 0, got {v}")

    def as_term_map(self) -> dict[str, float]:
        return {name: getattr(self, f"lambda_{i + 1}") for i, name in enumerate(TERM_NAMES)}

    def with_zeroed(self, term_names) -> "LossWeights":
        """Copy with the weights of the named terms set to 0 (ablation masks)."""
        updates = {}
        for name in term_names:
            if name not in TERM_NAMES:
                raise ConfigError(f"unknown loss term {name!r}")
            updates[f"lambda_{TERM_NAMES.index(name) + 1}"] = 0.0
        return replace(self, **updates)


@dataclass
class LossBundle:
    """Unweighted term values plus the weighted total for one step."""

    terms: dict
    total: object  # tensor during training, float after to_record()

    def to_record(self) -> dict[str, float]:
        def scalar(v):
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        rec = {name: scalar(v) for name, v in self.terms.items()}
        rec["total"] = scalar(self.total)
        return rec


def ce_disease(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-class binary cross-entropy with sigmoid semantics."""
    labels = torch.as_tensor(labels)
    if logits.shape != labels.shape:
        raise ContractError(f"logit/label shape mismatch: {tuple(logits.shape)} vs {tuple(labels.shape)}")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ContractError("disease labels must be multi-hot in {0, 1}")
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def ce_domain(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over categorical domain labels."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_d = logits.shape[1]
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(f"domain labels must be batch-length 1-D, got {tuple(labels.shape)}")
    if torch.any(labels < 0) or torch.any(labels >= n_d):
        raise ContractError(f"domain label out of range [0, {n_d})")
    return F.cross_entropy(logits, labels)


def kl_uniform(logits: torch.Tensor, task: str) -> torch.Tensor:
    """KL(uniform || prediction), pushing spurious-head predictions flat.

    Domain logits are read as one softmax distribution over K categories;
    disease logits as per-class Bernoullis each pushed toward (1/2, 1/2)
    and averaged.
    """
    if logits.shape[1] < 2:
        raise ContractError(f"kl_uniform needs K >= 2 categories, got {logits.shape[1]}")
    if task == "domain":
        k = logits.shape[1]
        p = torch.softmax(logits, dim=1).clamp(min=PROB_FLOOR, max=1.0)
        kl = ((1.0 / k) * (torch.log(torch.tensor(1.0 / k, dtype=logits.dtype)) - torch.log(p))).sum(dim=1)
        return kl.mean()
    if task == "disease":
        p = torch.sigmoid(logits)
        p1 = p.clamp(min=PROB_FLOOR, max=1.0)
        p0 = (1.0 - p).clamp(min=PROB_FLOOR, max=1.0)
        half = torch.tensor(0.5, dtype=logits.dtype)
        kl = 0.5 * (torch.log(half) - torch.log(p1)) + 0.5 * (torch.log(half) - torch.log(p0))
        return kl.mean()
    raise ContractError(f"unknown task {task!r}, expected 'disease' or 'domain'")


def _disease_contrastive(values: torch.Tensor, labels: torch.Tensor, mode: str) -> list[torch.Tensor]:
    # Per-class row semantics: positives of class c are compared on row c,
    # against the mean row of same-class (mode=same) or other-class (diff)
    # samples. Groups with an empty reference contribute nothing.
    terms = []
    n_c = values.shape[1]
    if labels.shape != (values.shape[0], n_c):
        raise ContractError(f"disease labels must be batch x n_c, got {tuple(labels.shape)}")
    for c in range(n_c):
        pos = labels[:, c] == 1
        ref = pos if mode == "same" else labels[:, c] == 0
        if not bool(pos.any()) or not bool(ref.any()):
            continue
        ref_mean = values[ref, c].mean(dim=0)
        diffs = values[pos, c] - ref_mean
        terms.extend((diffs**2).mean(dim=1).unbind())
    return terms


def _domain_contrastive(values: torch.Tensor, labels: torch.Tensor, mode: str) -> list[torch.Tensor]:
    # Whole-block semantics: each sample's n_d x h embedding is compared to
    # the mean block of same-domain (mode=same) or other-domain (diff) samples.
    terms = []
    if labels.dim() != 1 or labels.shape[0] != values.shape[0]:
        raise ContractError(f"domain labels must be batch-length 1-D, got {tuple(labels.shape)}")
    for d in torch.unique(labels):
        group = labels == d
        ref = group if mode == "same" else labels != d
        if not bool(ref.any()):
            continue
        ref_mean = values[ref].mean(dim=0)
        diffs = values[group] - ref_mean
        terms.extend((diffs**2).mean(dim=(1, 2)).unbind())
    return terms


def batch_contrastive(q: FeatureEmbedding, labels, mode: str) -> torch.Tensor:
    """Mean squared distance of eligible samples to their reference-group mean.

    mode="same" pulls causal features of same-label samples together;
    mode="diff" pulls spurious features toward the different-label mean.
    """
    if mode not in ("same", "diff"):
        raise ContractError(f"unknown mode {mode!r}, expected 'same' or 'diff'")
    if q.batch_size < 2:
        raise ContractError(f"batch_contrastive needs batch >= 2, got {q.batch_size}")
    labels = torch.as_tensor(labels)
    if q.branch == "disease":
        terms = _disease_contrastive(q.values, labels, mode)
    else:
        terms = _domain_contrastive(q.values, labels, mode)
    if not terms:
        return torch.zeros((), dtype=q.values.dtype)
    return torch.stack(terms).mean()


def assemble_total(parts: Mapping, weights: LossWeights) -> LossBundle:
    """Weighted sum of the twelve terms; rejects missing or non-finite parts."""
    missing = set(TERM_NAMES) - set(parts)
    if missing:
        raise ContractError(f"missing loss terms: {sorted(missing)}")
    term_weights = weights.as_term_map()
    total = 0.0
    for name in TERM_NAMES:
        part = parts[name]
        if torch.is_tensor(part):
            if not torch.isfinite(part).all():
                raise NumericError(f"loss term '{name}' is not finite ({float(part.detach())})")
        elif not math.isfinite(part):
            raise NumericError(f"loss term '{name}' is not finite ({part})")
        total = total + term_weights[name] * part
    return LossBundle(terms={name: parts[name] for name in TERM_NAMES}, total=total)
