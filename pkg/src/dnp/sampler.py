"""Reference-set construction from training-set feature maps.

Three subsampling strategies over a flattened candidate pool:

* random   - seeded uniform sample without replacement
* gcs      - greedy k-center (farthest-point) selection under L2
* pcgcs    - gcs run independently per semantic class, with budgets
             proportional to class frequency

Selected rows are always bit-exact copies of pool rows; no method averages
or synthesizes points. Labels are brought to feature resolution by
nearest-pixel downsampling with half-pixel-center alignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError
from .tensor_store import LabelMask, ReferenceSet, load_feature_map, load_label_mask

log = logging.getLogger(__name__)


class SamplingMethod(str, Enum):
    RANDOM = "random"
    GCS = "gcs"
    PCGCS = "pcgcs"

    @classmethod
    def parse(cls, name: str) -> "SamplingMethod":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown sampling method {name!r}; expected one of {[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class SamplingSpec:
    method: SamplingMethod
    budget: int
    seed: int
    projection_dim: int | None = None

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigurationError(f"budget must be >= 1, got {self.budget}")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ConfigurationError("projection_dim must be >= 1 when set")


@dataclass(frozen=True)
class CandidatePool:
    """Flattened training features with per-row provenance.

    ``source_index`` indexes into ``image_ids``; ``positions`` holds the flat
    feature-grid position within the source image. Rows at ignored label
    positions are excluded at construction, so ``labels`` never contains the
    ignore value.
    """

    features: np.ndarray
    labels: np.ndarray | None
    image_ids: tuple
    source_index: np.ndarray
    positions: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def downsample_labels(mask: LabelMask, target_h: int, target_w: int) -> LabelMask:
    """Nearest-pixel label downsampling with half-pixel-center alignment.

    Each target cell takes the label of the source pixel containing the
    cell's center: src = floor((t + 0.5) * src_dim / target_dim).
    """
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target dims must be positive, got ({target_h}, {target_w})")
    if target_h > mask.height or target_w > mask.width:
        raise ShapeError(
            f"target ({target_h}, {target_w}) exceeds source ({mask.height}, {mask.width})"
        )
    rows = np.minimum(
        ((np.arange(target_h) + 0.5) * (mask.height / target_h)).astype(np.int64),
        mask.height - 1,
    )
    cols = np.minimum(
        ((np.arange(target_w) + 0.5) * (mask.width / target_w)).astype(np.int64),
        mask.width - 1,
    )
    return LabelMask(mask.data[np.ix_(rows, cols)], ignore_value=mask.ignore_value)


def build_pool(
    samples,
    max_per_image: int | None = None,
    seed: int = 0,
    ignore_value: int = 255,
) -> CandidatePool:
    """Flatten feature maps (and labels, when every sample has them) into a pool.

    With ``max_per_image`` set, each image contributes a seeded uniform subset
    of its positions; the subset is identical across runs for the same seed.
    """
    if not samples:
        raise DataError("cannot build a pool from an empty dataset")
    with_labels = all(s.label_path is not None for s in samples)
    rng = np.random.default_rng(seed)

    feats, labels, src_idx, positions = [], [], [], []
    for i, sample in enumerate(samples):
        fmap = load_feature_map(sample.feature_path)
        rows = fmap.as_matrix()
        pos = np.arange(rows.shape[0], dtype=np.int64)
        row_labels = None
        if with_labels:
            mask = load_label_mask(sample.label_path, ignore_value=ignore_value)
            small = downsample_labels(mask, fmap.height, fmap.width)
            row_labels = small.data.reshape(-1)
            keep = row_labels != ignore_value
            rows, pos, row_labels = rows[keep], pos[keep], row_labels[keep]
        if max_per_image is not None and rows.shape[0] > max_per_image:
            pick = np.sort(rng.choice(rows.shape[0], size=max_per_image, replace=False))
            rows, pos = rows[pick], pos[pick]
            if row_labels is not None:
                row_labels = row_labels[pick]
        feats.append(rows)
        positions.append(pos)
        src_idx.append(np.full(rows.shape[0], i, dtype=np.int64))
        if row_labels is not None:
            labels.append(row_labels)

    features = np.concatenate(feats, axis=0)
    if features.shape[0] == 0:
        raise DataError("candidate pool is empty after ignore-label filtering")
    return CandidatePool(
        features=np.ascontiguousarray(features),
        labels=np.concatenate(labels) if with_labels else None,
        image_ids=tuple(s.image_id for s in samples),
        source_index=np.concatenate(src_idx),
        positions=np.concatenate(positions),
    )


def _base_manifest(spec: SamplingSpec, pool: CandidatePool, source: str) -> dict:
    return {
        "metric": "l2",
        "sampling_method": spec.method.value,
        "seed": int(spec.seed),
        "source": source,
        "budget": int(spec.budget),
        "pool_size": int(pool.size),
        "projection_dim": spec.projection_dim,
    }


def _take(pool: CandidatePool, indices: np.ndarray, spec: SamplingSpec, source: str) -> ReferenceSet:
    manifest = _base_manifest(spec, pool, source)
    return ReferenceSet(
        features=pool.features[indices].copy(),
        class_labels=pool.labels[indices].copy() if pool.labels is not None else None,
        manifest=manifest,
    )


def sample_random(pool: CandidatePool, spec: SamplingSpec, source: str = "") -> ReferenceSet:
    """Seeded uniform subsample of the pool, without replacement."""
    if pool.size == 0:
        raise DataError("cannot sample from an empty pool")
    if spec.budget >= pool.size:
        if spec.budget > pool.size:
            log.warning("budget %d exceeds pool size %d; keeping all rows", spec.budget, pool.size)
        indices = np.arange(pool.size)
    else:
        rng = np.random.default_rng(spec.seed)
        indices = np.sort(rng.choice(pool.size, size=spec.budget, replace=False))
    return _take(pool, indices, spec, source)


def greedy_k_center(
    features: np.ndarray,
    budget: int,
    start_index: int,
    projection: np.ndarray | None = None,
) -> np.ndarray:
    """Farthest-point selection: repeatedly add the row with maximal distance
    to the selected set (ties broken by lowest row index).

    Distances are squared L2 in float64, updated incrementally so the cost is
    O(budget * P * C) without a full pairwise matrix. With ``projection``
    given, selection distances are measured in the projected space while the
    returned indices still address the original rows.
    """
    work = features.astype(np.float64)
    if projection is not None:
        work = work @ projection
    n = work.shape[0]
    if budget >= n:
        return np.arange(n, dtype=np.int64)
    sq_norms = np.einsum("ij,ij->i", work, work)

    def sq_dist_to(idx: int) -> np.ndarray:
        d = sq_norms + sq_norms[idx] - 2.0 * (work @ work[idx])
        np.maximum(d, 0.0, out=d)
        return d

    selected = np.empty(budget, dtype=np.int64)
    selected[0] = start_index
    min_sq = sq_dist_to(start_index)
    for t in range(1, budget):
        nxt = int(np.argmax(min_sq))  # argmax returns the lowest index on ties
        selected[t] = nxt
        np.minimum(min_sq, sq_dist_to(nxt), out=min_sq)
    return selected


def _projection_matrix(rng: np.random.Generator, channels: int, dim: int) -> np.ndarray:
    return rng.standard_normal((channels, dim)) / np.sqrt(dim)


def sample_gcs(pool: CandidatePool, spec: SamplingSpec, source: str = "") -> ReferenceSet:
    """Greedy k-center coreset over the whole pool (seeded random start)."""
    if pool.size == 0:
        raise DataError("cannot sample from an empty pool")
    if spec.projection_dim is not None and spec.projection_dim >= pool.channels:
        raise ConfigurationError(
            f"projection_dim {spec.projection_dim} must be < channel count {pool.channels}"
        )
    if spec.budget >= pool.size:
        if spec.budget > pool.size:
            log.warning("budget %d exceeds pool size %d; keeping all rows", spec.budget, pool.size)
        return _take(pool, np.arange(pool.size), spec, source)
    rng = np.random.default_rng(spec.seed)
    start = int(rng.integers(pool.size))
    projection = None
    if spec.projection_dim is not None:
        projection = _projection_matrix(rng, pool.channels, spec.projection_dim)
    indices = greedy_k_center(pool.features, spec.budget, start, projection)
    return _take(pool, indices, spec, source)


def allocate_class_budgets(class_counts: np.ndarray, budget: int) -> np.ndarray:
    """Proportional budgets n_c = floor(budget * P_c / P), remainder assigned
    one-by-one to classes in descending size order, skipping saturated ones."""
    total = int(class_counts.sum())
    budgets = (budget * class_counts.astype(np.int64)) // total
    remainder = budget - int(budgets.sum())
    # descending count, ascending class index on ties
    order = np.lexsort((np.arange(len(class_counts)), -class_counts.astype(np.int64)))
    while remainder > 0:
        assigned = False
        for c in order:
            if remainder == 0:
                break
            if budgets[c] < class_counts[c]:
                budgets[c] += 1
                remainder -= 1
                assigned = True
        if not assigned:
            break  # every class saturated: budget >= total, handled by caller
    return budgets


def sample_pcgcs(
    pool: CandidatePool,
    spec: SamplingSpec,
    num_classes: int | None = None,
    source: str = "",
) -> ReferenceSet:
    """Per-class greedy coreset with proportional budgets.

    Each class runs an independent seeded GCS on its own rows; the output
    concatenates classes in ascending class-id order. The total selection
    size is exactly min(budget, pool size).
    """
    if pool.labels is None:
        raise ConfigurationError("pcgcs requires a labeled pool (labels directory missing?)")
    if pool.size == 0:
        raise DataError("cannot sample from an empty pool")
    if num_classes is not None and int(pool.labels.max()) >= num_classes:
        raise ConfigurationError(
            f"pool label {int(pool.labels.max())} out of range for {num_classes} classes"
        )
    if spec.budget >= pool.size:
        if spec.budget > pool.size:
            log.warning("budget %d exceeds pool size %d; keeping all rows", spec.budget, pool.size)
        refs = _take(pool, np.arange(pool.size), spec, source)
        return refs

    classes, counts = np.unique(pool.labels, return_counts=True)
    budgets = allocate_class_budgets(counts, spec.budget)

    chosen = []
    for cls, count, cls_budget in zip(classes, counts, budgets):
        if cls_budget == 0:
            continue
        rows = np.flatnonzero(pool.labels == cls)
        if count <= cls_budget:
            chosen.append(rows)
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(cls)]))
        start = int(rng.integers(rows.size))
        projection = None
        if spec.projection_dim is not None:
            projection = _projection_matrix(rng, pool.channels, spec.projection_dim)
        local = greedy_k_center(pool.features[rows], int(cls_budget), start, projection)
        chosen.append(rows[local])
    indices = np.concatenate(chosen)
    return _take(pool, indices, spec, source)
