"""Dual-branch classifier with complementary-attention feature disentanglement.

Each branch (disease, domain) runs a small convolutional backbone, a
channel+spatial attention enhancer, and a cross-attention transformer whose
post-softmax scores A produce the causal readout while the renormalized
complement (1 - A) / (n_tokens - 1) produces the spurious readout over the
same token sequence. Per-query linear heads map causal and spurious
embeddings to logits; the causal head is reused for intervened features.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .embeddings import AttentionScores, FeatureEmbedding
from .errors import ConfigError, ContractError
from .relational import RelationalScorer

CHECKPOINT_MAGIC = "CROC1"


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 1
    n_c: int = 9
    n_d: int = 3
    h: int = 32
    backbone_width: tuple = (16, 32, 64, 64)
    n_heads: int = 4
    n_layers: int = 1
    drop_prob: float = 0.3

    def __post_init__(self):
        if self.n_c < 2:
            raise ConfigError(f"n_c must be >= 2, got {self.n_c}")
        if self.n_d < 2:
            raise ConfigError(f"n_d must be >= 2, got {self.n_d}")
        if self.h < 4:
            raise ConfigError(f"h must be >= 4, got {self.h}")
        if not (0.0 <= self.drop_prob <= 1.0):
            raise ConfigError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if not self.backbone_width:
            raise ConfigError("backbone_width must list at least one stage width")
        if self.h % self.n_heads != 0:
            raise ConfigError(f"h={self.h} must be divisible by n_heads={self.n_heads}")
        factor = self.downsample_factor
        if self.image_size % factor != 0:
            raise ConfigError(
                f"image_size={self.image_size} not divisible by backbone downsampling factor {factor}"
            )
        if self.n_tokens < 2:
            raise ConfigError(
                f"backbone yields {self.n_tokens} token(s); need >= 2 for the complementary readout"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.backbone_width)

    @property
    def n_tokens(self) -> int:
        side = self.image_size // self.downsample_factor
        return side * side


def complementary_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int):
    """Multi-head attention yielding both the usual and the complementary readout.

    With post-softmax scores A (rows sum to 1 over tokens), the causal
    readout is A @ V and the spurious readout uses (1 - A) renormalized by
    (n_tokens - 1) so it stays a convex combination of token values.
    Returns (causal, spurious, scores) with scores batch x heads x n_q x n_t.
    """
    batch, n_q, width = q.shape
    n_t = k.shape[1]
    if n_t < 2:
        raise ContractError(f"complementary attention needs >= 2 tokens, got {n_t}")
    d_head = width // n_heads

    def split(x):
        return x.view(batch, -1, n_heads, d_head).transpose(1, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = torch.softmax(qh @ kh.transpose(2, 3) / math.sqrt(d_head), dim=-1)
    causal = scores @ vh
    spurious = ((1.0 - scores) / (n_t - 1)) @ vh

    def merge(x):
        return x.transpose(1, 2).reshape(batch, n_q, width)

    return merge(causal), merge(spurious), scores


class ChannelAttention(nn.Module):
    """Global-pooled MLP gate over channels."""

    def __init__(self, width: int, reduction: int = 4):
        super().__init__()
        hidden = max(width // reduction, 4)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.ReLU(), nn.Linear(hidden, width))

    def forward(self, x):
        gate = torch.sigmoid(self.mlp(x.mean(dim=(2, 3))))
        return x * gate.unsqueeze(2).unsqueeze(3)


class SpatialAttention(nn.Module):
    """Single-channel conv gate over spatial positions."""

    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(width, 1, kernel_size=7, padding=3)

    def forward(self, x):
        return x * torch.sigmoid(self.conv(x))


class FeatureEnhancer(nn.Module):
    """Sequential channel then spatial attention."""

    def __init__(self, width: int):
        super().__init__()
        self.channel = ChannelAttention(width)
        self.spatial = SpatialAttention(width)

    def forward(self, x):
        return self.spatial(self.channel(x))


def _norm_groups(width: int) -> int:
    return 4 if width % 4 == 0 else 1


class SmallBackbone(nn.Module):
    """Stack of stride-2 conv stages; downsampling factor is 2 ** n_stages."""

    def __init__(self, in_channels: int, widths):
        super().__init__()
        stages = []
        prev = in_channels
        for w in widths:
            stages += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.GroupNorm(_norm_groups(w), w), nn.ReLU()]
            prev = w
        self.stages = nn.Sequential(*stages)

    def forward(self, x):
        return self.stages(x)


class DisentangledDecoderLayer(nn.Module):
    """Cross-attention layer maintaining parallel causal and spurious streams.

    Scores are computed from the causal stream; both streams share the
    projection and feed-forward weights and differ only in which readout
    (A vs renormalized 1 - A) updates them.
    """

    def __init__(self, h: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(h, h)
        self.k_proj = nn.Linear(h, h)
        self.v_proj = nn.Linear(h, h)
        self.out_proj = nn.Linear(h, h)
        self.norm_attn = nn.LayerNorm(h)
        self.norm_ffn = nn.LayerNorm(h)
        self.ffn = nn.Sequential(nn.Linear(h, 2 * h), nn.ReLU(), nn.Linear(2 * h, h))

    def forward(self, q_ca, q_sp, tokens):
        k, v = self.k_proj(tokens), self.v_proj(tokens)
        read_ca, read_sp, scores = complementary_attention(self.q_proj(q_ca), k, v, self.n_heads)
        q_ca = self.norm_attn(q_ca + self.out_proj(read_ca))
        q_ca = self.norm_ffn(q_ca + self.ffn(q_ca))
        q_sp = self.norm_attn(q_sp + self.out_proj(read_sp))
        q_sp = self.norm_ffn(q_sp + self.ffn(q_sp))
        return q_ca, q_sp, scores


class PerQueryHead(nn.Module):
    """Weight-shared linear map sending query row c to logit c."""

    def __init__(self, h: int):
        super().__init__()
        self.fc = nn.Linear(h, 1)

    def forward(self, q):
        return self.fc(q).squeeze(2)


@dataclass(frozen=True)
class BranchOutput:
    q_causal: FeatureEmbedding
    q_spurious: FeatureEmbedding
    logits_causal: torch.Tensor
    logits_spurious: torch.Tensor
    attention: AttentionScores

    def __post_init__(self):
        if self.q_causal.kind != "causal" or self.q_spurious.kind != "spurious":
            raise ContractError("branch output embeddings carry wrong kind tags")
        batches = {
            self.q_causal.batch_size,
            self.q_spurious.batch_size,
            self.logits_causal.shape[0],
            self.logits_spurious.shape[0],
        }
        if len(batches) != 1:
            raise ContractError(f"branch output arrays disagree on batch size: {sorted(batches)}")


class ClassifierBranch(nn.Module):
    """Backbone -> enhancer -> disentangling transformer -> per-query heads."""

    def __init__(self, cfg: ModelConfig, branch: str, n_queries: int):
        super().__init__()
        self.branch = branch
        width = cfg.backbone_width[-1]
        self.backbone = SmallBackbone(cfg.channels, cfg.backbone_width)
        self.enhancer = FeatureEnhancer(width)
        self.token_proj = nn.Conv2d(width, cfg.h, kernel_size=1)
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_tokens, cfg.h) * 0.02)
        self.query_embed = nn.Parameter(torch.randn(n_queries, cfg.h) * 0.02)
        self.layers = nn.ModuleList(
            DisentangledDecoderLayer(cfg.h, cfg.n_heads) for _ in range(cfg.n_layers)
        )
        self.head_causal = PerQueryHead(cfg.h)
        self.head_spurious = PerQueryHead(cfg.h)

    def forward(self, images) -> BranchOutput:
        feats = self.enhancer(self.backbone(images))
        tokens = self.token_proj(feats).flatten(2).transpose(1, 2) + self.pos_embed
        batch = images.shape[0]
        q_ca = self.query_embed.unsqueeze(0).expand(batch, -1, -1)
        q_sp = q_ca
        scores = None
        for layer in self.layers:
            q_ca, q_sp, scores = layer(q_ca, q_sp, tokens)
        return BranchOutput(
            q_causal=FeatureEmbedding(q_ca, branch=self.branch, kind="causal"),
            q_spurious=FeatureEmbedding(q_sp, branch=self.branch, kind="spurious"),
            logits_causal=self.head_causal(q_ca),
            logits_spurious=self.head_spurious(q_sp),
            attention=AttentionScores(scores),
        )

    def causal_logits(self, q: FeatureEmbedding) -> torch.Tensor:
        """Apply the causal head to any embedding of this branch (e.g. intervened)."""
        if q.branch != self.branch:
            raise ContractError(f"embedding belongs to branch {q.branch!r}, not {self.branch!r}")
        return self.head_causal(q.values)


class DualBranchModel(nn.Module):
    """Disease and domain branches with disjoint parameters, plus the
    relational scorer that compares their embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.disease = ClassifierBranch(cfg, "disease", cfg.n_c)
        self.domain = ClassifierBranch(cfg, "domain", cfg.n_d)
        self.scorer = RelationalScorer(cfg.h)

    def _check_images(self, images):
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ContractError(
                f"expected images batch x {expected[0]} x {expected[1]} x {expected[2]}, "
                f"got {tuple(images.shape)}"
            )

    def forward(self, images, run_domain: bool = True):
        self._check_images(images)
        out_disease = self.disease(images)
        out_domain = self.domain(images) if run_domain else None
        return out_disease, out_domain

    @torch.no_grad()
    def predict_disease(self, images, head: str = "causal", seed: int = 0) -> np.ndarray:
        """Per-class probabilities from the causal head (or the intervened path)."""
        from .intervention import InterventionConfig, intervene  # deferred: import cycle

        was_training = self.training
        self.eval()
        try:
            out, _ = self.forward(images, run_domain=False)
            if head == "causal":
                logits = out.logits_causal
            elif head == "backdoor":
                q_bd = intervene(
                    out.q_causal, out.q_spurious, InterventionConfig(self.cfg.drop_prob, rng_seed=seed)
                )
                logits = self.disease.causal_logits(q_bd)
            else:
                raise ContractError(f"unknown prediction head {head!r}")
            return torch.sigmoid(logits).numpy()
        finally:
            self.train(was_training)


class PlainBaseline(nn.Module):
    """Backbone + global average pool + linear head; no disentanglement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = SmallBackbone(cfg.channels, cfg.backbone_width)
        self.fc = nn.Linear(cfg.backbone_width[-1], cfg.n_c)

    def forward(self, images):
        return self.fc(self.backbone(images).mean(dim=(2, 3)))

    @torch.no_grad()
    def predict_disease(self, images, head: str = "causal", seed: int = 0) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            return torch.sigmoid(self.forward(images)).numpy()
        finally:
            self.train(was_training)


def build_model(config: ModelConfig) -> DualBranchModel:
    """Construct the dual-branch network for a validated config."""
    return DualBranchModel(config)


_ARCH_CLASSES = {"dual_branch": DualBranchModel, "plain_baseline": PlainBaseline}


def save_checkpoint(model, path, extra: Optional[dict] = None) -> None:
    """Write a single-file checkpoint: magic, config echo, named parameters."""
    arch = next(name for name, cls in _ARCH_CLASSES.items() if isinstance(model, cls))
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "arch": arch,
        "config": asdict(model.cfg),
        "params": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Load a checkpoint; returns (model, extra). Rejects foreign files."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a {CHECKPOINT_MAGIC} model checkpoint")
    cfg_dict = dict(payload["config"])
    cfg_dict["backbone_width"] = tuple(cfg_dict["backbone_width"])
    cfg = ModelConfig(**cfg_dict)
    model = _ARCH_CLASSES[payload["arch"]](cfg)
    model.load_state_dict(payload["params"])
    return model, payload.get("extra", {})
