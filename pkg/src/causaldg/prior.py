"""Causality maps over per-class embeddings and the task-prior loss.

A causality map estimates conditional activation between class embeddings:
entry (i, j) = (max_h Q_i) * (max_h Q_j) / (sum_h Q_j), read as P(Q_i | Q_j).
Asymmetry across the diagonal is a directed signal: class i drives class j
when entry (i, j) exceeds entry (j, i). The ground-truth map encodes a
declared causal DAG over findings with that same convention, and the prior
loss regresses predicted maps onto it.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .embeddings import FeatureEmbedding
from .errors import ContractError

EPS = 1e-8


def normalize_embeddings(q: FeatureEmbedding) -> FeatureEmbedding:
    """Clamp to >= 0 and divide by the global batch maximum (plus epsilon).

    Outputs lie in [0, 1] and read as per-class activation probabilities.
    An all-zero (or all-negative) input maps to all zeros.
    """
    clamped = q.values.clamp(min=0.0)
    scale = clamped.max() + EPS
    return FeatureEmbedding(values=clamped / scale, branch=q.branch, kind=q.kind)


def causality_map(q_norm: FeatureEmbedding) -> torch.Tensor:
    """Per-sample n_c x n_c conditional-activation map, entry (i, j) = P(Q_i | Q_j).

    Columns whose row-sum is degenerate (<= epsilon) are zero: no activation
    means no conditional evidence. Differentiable in the embeddings.
    """
    values = q_norm.values
    maxes = values.max(dim=2).values  # batch x n_c
    sums = values.sum(dim=2)  # batch x n_c
    maps = maxes.unsqueeze(2) * maxes.unsqueeze(1) / (sums.unsqueeze(1) + EPS)
    degenerate = (sums <= EPS).unsqueeze(1).expand_as(maps)
    return torch.where(degenerate, torch.zeros((), dtype=maps.dtype), maps)


def causality_signal(cmap: torch.Tensor, i: int, j: int, tol: float = 1e-9) -> int:
    """Directed signal for one pair: +1 for i->j, -1 for j->i, 0 for no signal."""
    forward, backward = float(cmap[i, j]), float(cmap[j, i])
    if abs(forward - backward) <= tol:
        return 0
    return 1 if forward > backward else -1


@dataclass(frozen=True)
class CausalGraph:
    """A DAG over finding names; edges are (cause, effect) name pairs."""

    nodes: tuple
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ContractError("duplicate node names in causal graph")
        for cause, effect in self.edges:
            for name in (cause, effect):
                if name not in self.nodes:
                    raise ContractError(f"edge references unknown node {name!r}")
        self.reachability()  # raises on cycles

    def reachability(self) -> set:
        """Transitive closure as a set of (cause, effect) index pairs."""
        index = {name: i for i, name in enumerate(self.nodes)}
        children: dict[int, set[int]] = {i: set() for i in range(len(self.nodes))}
        for cause, effect in self.edges:
            children[index[cause]].add(index[effect])
        closure = set()
        for start in range(len(self.nodes)):
            stack, seen = list(children[start]), set()
            while stack:
                node = stack.pop()
                if node == start:
                    raise ContractError(f"causal graph has a cycle through {self.nodes[start]!r}")
                if node in seen:
                    continue
                seen.add(node)
                stack.extend(children[node])
            closure.update((start, node) for node in seen)
        return closure


def parse_graph(text: str) -> CausalGraph:
    """Parse a graph config: node names first, then 'parent -> child' lines."""
    nodes, edges = [], set()
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" in line:
            cause, _, effect = line.partition("->")
            edges.add((cause.strip(), effect.strip()))
        else:
            nodes.append(line)
    return CausalGraph(nodes=tuple(nodes), edges=frozenset(edges))


def load_graph(path) -> CausalGraph:
    with open(path) as f:
        return parse_graph(f.read())


@dataclass(frozen=True)
class CausalityMap:
    """An n_c x n_c map with its node ordering (used for the ground truth)."""

    values: np.ndarray
    nodes: tuple

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([""] + list(self.nodes))
            for name, row in zip(self.nodes, self.values):
                writer.writerow([name] + [f"{v:.6g}" for v in row])


def build_gt_map(graph: CausalGraph, hi: float = 0.9, lo: float = 0.1, base: float = 0.5) -> CausalityMap:
    """Ground-truth map from a DAG: entry (cause, effect) = hi for every edge
    implied under transitive reachability, the reverse direction = lo, and
    base for unrelated pairs and the diagonal.
    """
    if not (0.0 <= lo < base < hi <= 1.0):
        raise ContractError(f"need 0 <= lo < base < hi <= 1, got lo={lo} base={base} hi={hi}")
    n = len(graph.nodes)
    values = np.full((n, n), base, dtype=np.float64)
    for cause, effect in graph.reachability():
        values[cause, effect] = hi
        values[effect, cause] = lo
    return CausalityMap(values=values, nodes=graph.nodes)


def prior_loss(pred: torch.Tensor, gt) -> torch.Tensor:
    """Mean over the batch of the mean squared map difference."""
    gt_values = gt.values if isinstance(gt, CausalityMap) else gt
    gt_tensor = torch.as_tensor(np.asarray(gt_values), dtype=pred.dtype)
    if pred.dim() != 3 or pred.shape[1:] != gt_tensor.shape:
        raise ContractError(
            f"map size mismatch: predictions {tuple(pred.shape)} vs ground truth {tuple(gt_tensor.shape)}"
        )
    return ((pred - gt_tensor) ** 2).mean()


# Umbrella finding whose components imply it; used when the class list
# contains these standard CXR names and no explicit graph is given.
LUNG_OPACITY_COMPONENTS = ("Consolidation", "Effusion", "Edema", "Pneumonia", "Atelectasis")


def default_cxr_graph(class_names) -> CausalGraph:
    """Default task DAG: 'Lung opacity' is a parent of each of its component
    findings when both names are present; everything else is unrelated.
    """
    names = tuple(class_names)
    edges = set()
    if "Lung opacity" in names:
        for child in LUNG_OPACITY_COMPONENTS:
            if child in names:
                edges.add(("Lung opacity", child))
    return CausalGraph(nodes=names, edges=frozenset(edges))
