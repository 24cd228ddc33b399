"""causaldg: dual-branch causal/spurious disentanglement for domain-shift robustness."""

from .data import ImageDataset, Sample, SyntheticSpec, generate_synthetic, load_manifest, make_batches
from .embeddings import AttentionScores, FeatureEmbedding
from .intervention import InterventionConfig, intervene
from .losses import LossBundle, LossWeights, assemble_total, batch_contrastive, ce_disease, ce_domain, kl_uniform
from .metrics import EvalReport, ReportPair, auc, average_precision, drop, full_report
from .model import BranchOutput, DualBranchModel, ModelConfig, PlainBaseline, build_model, load_checkpoint, save_checkpoint
from .prior import CausalGraph, CausalityMap, build_gt_map, causality_map, normalize_embeddings, prior_loss
from .relational import PairingKind, RelationalScore, RelationalScorer, ground_truth, rs_loss
from .training import Checkpoint, History, StepRecord, TrainConfig, evaluate_epoch, train

__version__ = "0.1.0"
