"""Dataset ingestion, synthetic multi-domain generation, and batch sampling.

The synthetic generator draws class-specific motifs (the causal signal,
identical in distribution across domains) and domain-specific corner
markers plus background shifts (the spurious signal). In ID data the
marker correlates with the labels at a controllable strength; OOD data
uses a held-out marker with the correlation severed.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import ContractError, IngestionError

CORNERS = ("top_left", "top_right", "bottom_left", "bottom_right")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # channels x H x W, float in [0, 1]
    disease_labels: np.ndarray  # multi-hot, length n_c
    domain_label: int
    sample_id: str


@dataclass
class ImageDataset:
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    disease_labels: np.ndarray  # N x n_c, {0, 1}
    domain_labels: np.ndarray  # N, ints in [0, n_domains)
    sample_ids: list[str]
    class_names: list[str]
    domain_names: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    def sample(self, i: int) -> Sample:
        return Sample(
            image=self.images[i],
            disease_labels=self.disease_labels[i],
            domain_label=int(self.domain_labels[i]),
            sample_id=self.sample_ids[i],
        )

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(
            images=self.images[indices],
            disease_labels=self.disease_labels[indices],
            domain_labels=self.domain_labels[indices],
            sample_ids=[self.sample_ids[i] for i in indices],
            class_names=list(self.class_names),
            domain_names=list(self.domain_names),
        )


def _stretch_contrast(img: np.ndarray) -> np.ndarray:
    # Rescale to the full 0-255 range, then down to [0, 1]; flat images map to 0.
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float32)
    return ((img - lo) * (255.0 / (hi - lo)) / 255.0).astype(np.float32)


def load_manifest(path, image_size: int = 64, channels: int = 1, class_names=None) -> ImageDataset:
    """Load a CSV manifest: header `image_path,<finding columns...>,domain`.

    Images are resized to image_size, contrast-stretched over 0-255, and
    scaled to [0, 1]. Relative image paths resolve against the manifest's
    directory. Domain names map to contiguous ids in sorted order.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise IngestionError(f"{path}: missing header row")
    header = [c.strip() for c in rows[0]]
    if header[0] != "image_path" or header[-1] != "domain":
        raise IngestionError(f"{path}: header must start with 'image_path' and end with 'domain'")
    findings = header[1:-1]
    if not findings:
        raise IngestionError(f"{path}: no finding columns in header")
    if class_names is not None:
        unknown = [c for c in findings if c not in class_names]
        if unknown or list(findings) != list(class_names):
            raise IngestionError(f"{path}: finding columns {findings} do not match expected {list(class_names)}")

    images, labels, domain_names_raw, ids = [], [], [], []
    mode = "L" if channels == 1 else "RGB"
    for row_num, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path} row {row_num}: expected {len(header)} columns, got {len(row)}")
        img_path = row[0] if os.path.isabs(row[0]) else os.path.join(base_dir, row[0])
        if not os.path.exists(img_path):
            raise IngestionError(f"{path} row {row_num}: image file not found: {row[0]}")
        try:
            lab = np.array([int(v) for v in row[1:-1]], dtype=np.int64)
        except ValueError:
            raise IngestionError(f"{path} row {row_num}: non-integer finding value") from None
        if not np.all((lab == 0) | (lab == 1)):
            raise IngestionError(f"{path} row {row_num}: finding values must be 0 or 1")
        if lab.sum() == 0:
            raise IngestionError(f"{path} row {row_num}: empty supervision (no finding column set)")
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert(mode).resize((image_size, image_size), Image.BILINEAR), dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        images.append(_stretch_contrast(arr))
        labels.append(lab)
        domain_names_raw.append(row[-1].strip())
        ids.append(row[0])

    domain_names = sorted(set(domain_names_raw))
    domain_ids = {name: i for i, name in enumerate(domain_names)}
    n = len(images)
    return ImageDataset(
        images=np.stack(images) if n else np.zeros((0, channels, image_size, image_size), dtype=np.float32),
        disease_labels=np.stack(labels) if n else np.zeros((0, len(findings)), dtype=np.int64),
        domain_labels=np.array([domain_ids[d] for d in domain_names_raw], dtype=np.int64),
        sample_ids=ids,
        class_names=list(findings),
        domain_names=domain_names,
    )


def save_dataset(dataset: ImageDataset, out_dir) -> str:
    """Write 8-bit PNGs plus a manifest.csv; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_path"] + dataset.class_names + ["domain"])
        for i in range(len(dataset)):
            rel = os.path.join("images", f"{i:06d}.png")
            img = dataset.images[i]
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            pil = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
            pil.save(os.path.join(out_dir, rel))
            writer.writerow(
                [rel]
                + [int(v) for v in dataset.disease_labels[i]]
                + [dataset.domain_names[dataset.domain_labels[i]]]
            )
    return manifest_path


@dataclass(frozen=True)
class SyntheticSpec:
    """Controls the synthetic multi-domain benchmark generator.

    Class 0 is the no-finding class: it has no motif and its label derives
    from the other classes being absent (its prevalence entry is ignored).
    Per-domain parameter tuples carry n_domains + 1 entries; the last one
    is the held-out domain used for OOD generation.
    """

    n_domains: int = 3
    n_classes: int = 4
    image_size: int = 64
    correlation_strength: float = 0.9
    label_prevalence: tuple = ()
    background_level: tuple = ()
    token_intensity: tuple = ()
    token_size: int = 8
    motif_intensity: float = 0.62
    motif_noise: float = 0.12
    noise_std: float = 0.10
    jitter: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_domains < 2:
            raise ContractError(f"n_domains must be >= 2, got {self.n_domains}")
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")
        if not (0.0 <= self.correlation_strength <= 1.0):
            raise ContractError(f"correlation_strength must be in [0, 1], got {self.correlation_strength}")
        if not self.label_prevalence:
            object.__setattr__(self, "label_prevalence", (0.5,) + (0.35,) * (self.n_classes - 1))
        if len(self.label_prevalence) != self.n_classes:
            raise ContractError("label_prevalence must have one rate per class")
        if not all(0.0 < p < 1.0 for p in self.label_prevalence):
            raise ContractError("label prevalences must lie in (0, 1)")
        if not self.background_level:
            # ID backgrounds spread over a narrow band; the held-out domain sits
            # inside it so the marker change dominates the OOD shift.
            spread = [0.42 + 0.08 * i / max(self.n_domains - 1, 1) for i in range(self.n_domains)]
            object.__setattr__(self, "background_level", tuple(spread) + (float(np.mean(spread)),))
        if not self.token_intensity:
            object.__setattr__(self, "token_intensity", (1.0,) * (self.n_domains + 1))
        for name in ("background_level", "token_intensity"):
            if len(getattr(self, name)) != self.n_domains + 1:
                raise ContractError(f"{name} needs n_domains + 1 entries (last one is the held-out domain)")

    @property
    def class_names(self) -> tuple:
        return ("no_finding",) + tuple(f"finding_{chr(ord('a') + c)}" for c in range(self.n_classes - 1))


def _motif_mask(spec: SyntheticSpec, finding: int, rng: np.random.Generator) -> np.ndarray:
    # Deterministic per-class shape and anchor (plus a small positional
    # jitter) so the causal signal is domain-independent by construction.
    size = spec.image_size
    anchors = [(0.5, 0.3), (0.5, 0.7), (0.3, 0.5), (0.7, 0.5), (0.35, 0.35), (0.65, 0.65)]
    cy, cx = anchors[finding % len(anchors)]
    cy = int(cy * size) + int(rng.integers(-spec.jitter, spec.jitter + 1))
    cx = int(cx * size) + int(rng.integers(-spec.jitter, spec.jitter + 1))
    radius = max(size // 10, 3)
    yy, xx = np.ogrid[:size, :size]
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    shape = finding % 3
    if shape == 0:  # disc
        return dist2 <= radius**2
    if shape == 1:  # ring
        return (dist2 <= radius**2) & (dist2 >= (radius // 2) ** 2)
    # cross
    return ((np.abs(yy - cy) <= radius // 3) | (np.abs(xx - cx) <= radius // 3)) & (dist2 <= radius**2)


def _corner_slices(corner: str, size: int, token: int):
    if corner == "top_left":
        return slice(0, token), slice(0, token)
    if corner == "top_right":
        return slice(0, token), slice(size - token, size)
    if corner == "bottom_left":
        return slice(size - token, size), slice(0, token)
    return slice(size - token, size), slice(size - token, size)


def generate_synthetic(spec: SyntheticSpec, n_samples: int, role: str) -> ImageDataset:
    """Generate a fully seeded dataset in the given role.

    ID: samples spread over the n_domains source domains, with the domain
    (hence its marker) aligned to a label-conditioned choice with
    probability correlation_strength. OOD: every sample carries the
    held-out domain's marker and background; labels play no part in it.
    """
    role = role.upper()
    if role not in ("ID", "OOD"):
        raise ContractError(f"role must be 'ID' or 'OOD', got {role!r}")
    rng = np.random.default_rng([spec.seed, 0 if role == "ID" else 1])
    size, n_c = spec.image_size, spec.n_classes

    labels = np.zeros((n_samples, n_c), dtype=np.int64)
    prev = np.asarray(spec.label_prevalence)
    labels[:, 1:] = rng.random((n_samples, n_c - 1)) < prev[1:]
    labels[:, 0] = labels[:, 1:].sum(axis=1) == 0

    # The label-conditioned domain choice: first positive finding, modulo
    # the number of source domains (pure no-finding samples map to 0).
    first_finding = np.argmax(labels[:, 1:] == 1, axis=1) + 1
    first_finding[labels[:, 1:].sum(axis=1) == 0] = 0
    conditioned = first_finding % spec.n_domains

    if role == "ID":
        aligned = rng.random(n_samples) < spec.correlation_strength
        random_domain = rng.integers(0, spec.n_domains, n_samples)
        domains = np.where(aligned, conditioned, random_domain)
        param_index = domains
        domain_names = [f"site_{d}" for d in range(spec.n_domains)]
    else:
        domains = np.zeros(n_samples, dtype=np.int64)
        param_index = np.full(n_samples, spec.n_domains)
        domain_names = ["heldout"]

    images = np.zeros((n_samples, 1, size, size), dtype=np.float32)
    for i in range(n_samples):
        p = int(param_index[i])
        img = spec.background_level[p] + rng.normal(0.0, spec.noise_std, (size, size))
        for finding in range(1, n_c):
            if labels[i, finding]:
                mask = _motif_mask(spec, finding - 1, rng)
                img[mask] = spec.motif_intensity + rng.normal(0.0, spec.motif_noise, int(mask.sum()))
        ys, xs = _corner_slices(CORNERS[p % 4], size, spec.token_size)
        img[ys, xs] = spec.token_intensity[p]
        images[i, 0] = np.clip(img, 0.0, 1.0)

    return ImageDataset(
        images=images,
        disease_labels=labels,
        domain_labels=domains.astype(np.int64),
        sample_ids=[f"{role.lower()}-{i:05d}" for i in range(n_samples)],
        class_names=list(spec.class_names),
        domain_names=domain_names,
    )


def make_batches(dataset: ImageDataset, batch_size: int, seed: int):
    """One epoch of index batches via stratified round-robin interleaving.

    Samples are bucketed by (domain, anchor class) where the anchor is the
    sample's rarest positive class; each (shuffled) bucket is spread evenly
    over the epoch so per-batch class and domain counts track the global
    prevalences. Every sample appears exactly once; fixed seeds reproduce
    the batch order bitwise.
    """
    if batch_size < 4:
        raise ContractError(f"batch_size must be >= 4, got {batch_size}")
    n = len(dataset)
    if n == 0:
        return
    prevalence = dataset.disease_labels.mean(axis=0)
    rng = np.random.default_rng(seed)

    buckets: dict[tuple, list[int]] = {}
    for i in range(n):
        positives = np.flatnonzero(dataset.disease_labels[i])
        anchor = int(positives[np.argmin(prevalence[positives])]) if len(positives) else -1
        buckets.setdefault((int(dataset.domain_labels[i]), anchor), []).append(i)

    def interleave(groups) -> list[int]:
        # Weighted-fair merge: item k of an m-element group sits at (k + 0.5) / m,
        # so every group is spread evenly over the merged order.
        entries = []
        for rank, members in enumerate(groups):
            m = len(members)
            entries.extend(((k + 0.5) / m, rank, int(idx)) for k, idx in enumerate(members))
        entries.sort()
        return [idx for _, _, idx in entries]

    ordered_buckets = []
    for key in sorted(buckets):
        # Within a bucket, stratify by the full label pattern (shuffling only
        # inside each pattern) so co-occurring classes also spread evenly.
        patterns: dict[tuple, list[int]] = {}
        for idx in buckets[key]:
            patterns.setdefault(tuple(dataset.disease_labels[idx]), []).append(idx)
        shuffled = []
        for pattern_key in sorted(patterns):
            members = np.array(patterns[pattern_key])
            rng.shuffle(members)
            shuffled.append(members)
        ordered_buckets.append(interleave(shuffled))

    order = interleave(ordered_buckets)
    for start in range(0, n, batch_size):
        yield np.array(order[start : start + batch_size])


def split_train_val(dataset: ImageDataset, val_fraction: float, seed: int):
    """Per-domain stratified split; the total validation count is exactly
    round(N * val_fraction) via largest-remainder allocation."""
    if not (0.0 < val_fraction < 1.0):
        raise ContractError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    target_val = int(round(n * val_fraction))
    domains = np.unique(dataset.domain_labels)
    quotas = {int(d): (dataset.domain_labels == d).sum() * val_fraction for d in domains}
    counts = {d: int(np.floor(q)) for d, q in quotas.items()}
    remainders = sorted(quotas, key=lambda d: quotas[d] - counts[d], reverse=True)
    for d in remainders:
        if sum(counts.values()) >= target_val:
            break
        counts[d] += 1

    val_idx = []
    for d in domains:
        members = np.flatnonzero(dataset.domain_labels == d)
        rng.shuffle(members)
        val_idx.extend(members[: counts[int(d)]])
    val_mask = np.zeros(n, dtype=bool)
    val_mask[val_idx] = True
    return dataset.subset(np.flatnonzero(~val_mask)), dataset.subset(np.flatnonzero(val_mask))


def stock_benchmark_spec(seed: int = 0) -> SyntheticSpec:
    """The stock synthetic benchmark: 3 ID domains + 1 held-out, strong
    marker-label correlation, 64 x 64 grayscale images."""
    return SyntheticSpec(n_domains=3, n_classes=4, image_size=64, correlation_strength=0.9, seed=seed)


def with_seed(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    return replace(spec, seed=seed)
