"""Latent backdoor adjustment via intra-batch shuffling of spurious features.

Each sample's causal embedding is paired with a randomly drawn other
sample's spurious embedding (one uniform permutation per call), and the
spurious addend is dropped per sample with the configured probability.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .embeddings import FeatureEmbedding
from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class InterventionConfig:
    drop_prob: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_prob <= 1.0):
            raise ConfigError(f"drop_prob must be in [0, 1], got {self.drop_prob}")


def intervene(
    q_causal: FeatureEmbedding,
    q_spurious: FeatureEmbedding,
    cfg: InterventionConfig,
) -> FeatureEmbedding:
    """Compose intervened features: Q_bd[i] = Q_ca[i] + m_i * Q_sp[perm(i)].

    perm is a uniform random batch permutation and m_i is 0 with probability
    drop_prob. Gradients flow through both addends; fixed rng_seed gives an
    identical output.
    """
    if q_causal.kind != "causal" or q_spurious.kind != "spurious":
        raise ContractError(f"expected causal + spurious inputs, got {q_causal.kind} + {q_spurious.kind}")
    if q_causal.branch != q_spurious.branch:
        raise ContractError(f"branch mismatch: {q_causal.branch} vs {q_spurious.branch}")
    if q_causal.values.shape != q_spurious.values.shape:
        raise ContractError(
            f"shape mismatch: {tuple(q_causal.values.shape)} vs {tuple(q_spurious.values.shape)}"
        )
    batch = q_causal.batch_size
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    perm = torch.randperm(batch, generator=gen)
    keep = (torch.rand(batch, generator=gen) >= cfg.drop_prob).to(q_causal.values.dtype)
    values = q_causal.values + keep.view(batch, 1, 1) * q_spurious.values[perm]
    return FeatureEmbedding(values=values, branch=q_causal.branch, kind="intervened")
