"""Tagged embedding containers shared by the model, losses, and intervention."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError

BRANCHES = ("disease", "domain")
KINDS = ("causal", "spurious", "intervened")


@dataclass(frozen=True)
class FeatureEmbedding:
    """A batch of per-query embeddings (batch x n_queries x h) with provenance tags.

    The tags are immutable after creation; downstream operations use them to
    enforce that causal/spurious/intervened features are not mixed up.
    """

    values: torch.Tensor
    branch: str
    kind: str

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise ContractError(f"unknown branch {self.branch!r}, expected one of {BRANCHES}")
        if self.kind not in KINDS:
            raise ContractError(f"unknown kind {self.kind!r}, expected one of {KINDS}")
        if self.values.dim() != 3:
            raise ContractError(f"embedding must be batch x n_queries x h, got shape {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ContractError(f"non-finite entries in {self.branch}/{self.kind} embedding")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def n_queries(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class AttentionScores:
    """Post-softmax cross-attention weights, batch x heads x n_queries x n_tokens.

    The complementary set is derived as 1 - values, so complementarity holds
    by construction.
    """

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ContractError(f"attention scores must be 4-D, got shape {tuple(self.values.shape)}")

    def complement(self) -> torch.Tensor:
        return 1.0 - self.values
