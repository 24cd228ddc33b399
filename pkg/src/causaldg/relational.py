"""Relational scorer: learns which cross-branch embedding pairings are related.

Causal-with-spurious pairings across the two branches are "matched"
(ground truth 1); causal-with-causal and spurious-with-spurious are
"mismatched" (ground truth 0). A shared affine map plus sigmoid scores
every pairing, trained by MSE regression to those construction-defined
targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .embeddings import FeatureEmbedding
from .errors import ContractError


class PairingKind(Enum):
    CA_Y_CA_D = "ca_y x ca_d"
    CA_Y_SP_D = "ca_y x sp_d"
    SP_Y_SP_D = "sp_y x sp_d"
    SP_Y_CA_D = "sp_y x ca_d"


def ground_truth(kind: PairingKind) -> int:
    """1 for the causal-with-spurious pairings, 0 for kind-matched ones."""
    return 1 if kind in (PairingKind.CA_Y_SP_D, PairingKind.SP_Y_CA_D) else 0


@dataclass(frozen=True)
class RelationalScore:
    value: torch.Tensor  # scalar in (0, 1)
    kind: PairingKind


class RelationalScorer(nn.Module):
    """Scores each of the four cross-branch pairings with one shared affine map.

    Each embedding is mean-pooled over its query axis to a length-h vector
    (disease and domain branches have different query counts), the pair is
    concatenated to length 2h, and a single Linear + sigmoid yields the
    score. The pairing kind is not an input: the scorer must learn to
    compare representations, not memorize kinds.
    """

    def __init__(self, h: int):
        super().__init__()
        self.h = h
        self.fc = nn.Linear(2 * h, 1)

    def score_pairs(
        self,
        q_y_ca: FeatureEmbedding,
        q_y_sp: FeatureEmbedding,
        q_d_ca: FeatureEmbedding,
        q_d_sp: FeatureEmbedding,
    ) -> list[RelationalScore]:
        """Return 4 scores per sample, one per PairingKind, sample-major."""
        embeddings = {"ca_y": q_y_ca, "sp_y": q_y_sp, "ca_d": q_d_ca, "sp_d": q_d_sp}
        for name, emb in embeddings.items():
            expected_branch = "disease" if name.endswith("_y") else "domain"
            expected_kind = "causal" if name.startswith("ca") else "spurious"
            if emb.branch != expected_branch or emb.kind != expected_kind:
                raise ContractError(f"{name} slot got {emb.branch}/{emb.kind} embedding")
        batch_sizes = {emb.batch_size for emb in embeddings.values()}
        if len(batch_sizes) != 1:
            raise ContractError(f"embeddings disagree on batch size: {sorted(batch_sizes)}")

        pooled = {name: emb.values.mean(dim=1) for name, emb in embeddings.items()}
        pairs = [
            (PairingKind.CA_Y_CA_D, pooled["ca_y"], pooled["ca_d"]),
            (PairingKind.CA_Y_SP_D, pooled["ca_y"], pooled["sp_d"]),
            (PairingKind.SP_Y_SP_D, pooled["sp_y"], pooled["sp_d"]),
            (PairingKind.SP_Y_CA_D, pooled["sp_y"], pooled["ca_d"]),
        ]
        # One stacked forward pass; scores laid out pairing-major then
        # reordered sample-major.
        stacked = torch.cat([torch.cat([a, b], dim=1) for _, a, b in pairs], dim=0)
        values = torch.sigmoid(self.fc(stacked)).squeeze(1)
        batch = batch_sizes.pop()
        scores = []
        for i in range(batch):
            for p, (kind, _, _) in enumerate(pairs):
                scores.append(RelationalScore(value=values[p * batch + i], kind=kind))
        return scores

    forward = score_pairs


def rs_loss(scores: list[RelationalScore]) -> torch.Tensor:
    """Mean squared deviation of scores from their ground-truth relations."""
    if not scores:
        raise ContractError("rs_loss needs a nonempty score list")
    values = torch.stack([s.value for s in scores])
    targets = torch.tensor([float(ground_truth(s.kind)) for s in scores], dtype=values.dtype)
    return ((values - targets) ** 2).mean()
