"""Exact nearest-neighbor distances and k-smallest-mean anomaly scores.

The score for a query feature is the arithmetic mean of its k smallest
distances to the reference matrix. Search is exact: every query/reference
pair is evaluated, chunked over queries to bound memory. The same distance
kernel backs both ``pairwise_distances`` and ``knn_scores``, so scores equal
"sort the full distance row, average the first k" bit-for-bit.

Numerics: cross terms use float32 BLAS (the hot loop), norms and means
accumulate in float64, stored results are float32. Squared L2 is clamped at
zero before the square root to absorb round-off. Chunk boundaries are fixed
by the configured chunk size and chunk results are merged in index order, so
outputs are bit-identical regardless of worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, DataError, DomainError, ShapeError, ValidationError
from .tensor_store import FeatureMap, ReferenceSet, ScoreMap, load_feature_map

log = logging.getLogger(__name__)


class Metric(str, Enum):
    """Distance function between feature vectors."""

    L2 = "l2"
    L1 = "l1"
    COSINE = "cosine"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown metric {name!r}; expected one of {[m.value for m in cls]}"
            ) from None


@dataclass(frozen=True)
class KnnConfig:
    """Neighbor count, metric, and query batching granularity."""

    k: int
    metric: Metric = Metric.L2
    query_chunk: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.query_chunk < 1:
            raise ConfigurationError(f"query_chunk must be >= 1, got {self.query_chunk}")


def _ref_matrix(refs) -> np.ndarray:
    if isinstance(refs, ReferenceSet):
        return refs.features
    refs = np.ascontiguousarray(refs, dtype=np.float32)
    if refs.ndim != 2:
        raise ShapeError(f"reference matrix must be 2-d, got shape {refs.shape}")
    return refs


def _query_matrix(queries) -> np.ndarray:
    if isinstance(queries, FeatureMap):
        return queries.as_matrix()
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.ndim != 2:
        raise ShapeError(f"query matrix must be 2-d, got shape {queries.shape}")
    return queries


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x, dtype=np.float64)


def _check_norms(norms: np.ndarray, side: str) -> None:
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DomainError(f"cosine distance undefined for zero-norm {side} row {int(zero[0])}")


class _DistanceKernel:
    """Per-metric chunk kernel with reference-side quantities precomputed."""

    def __init__(self, refs: np.ndarray, metric: Metric):
        self.refs = refs
        self.metric = metric
        self.ref_sq = _sq_norms(refs)
        if metric is Metric.COSINE:
            _check_norms(self.ref_sq, "reference")

    def sq_or_distances(self, chunk: np.ndarray) -> np.ndarray:
        """Return float64 squared L2 distances, or plain distances for L1/cosine."""
        if self.metric is Metric.L2:
            cross = chunk @ self.refs.T  # float32 BLAS
            d2 = _sq_norms(chunk)[:, None] + self.ref_sq[None, :]
            d2 -= 2.0 * cross
            np.maximum(d2, 0.0, out=d2)
            return d2
        if self.metric is Metric.COSINE:
            q_sq = _sq_norms(chunk)
            _check_norms(q_sq, "query")
            cross = chunk @ self.refs.T
            d = 1.0 - cross / np.sqrt(q_sq[:, None] * self.ref_sq[None, :])
            np.clip(d, 0.0, 2.0, out=d)
            return d
        # L1: broadcast |q - r| into a reused float32 buffer, reduce channel
        # blocks of <= 64 in float32 and accumulate blocks in float64 (keeps
        # the error ~1e-7 independent of C while staying memory-bound cheap)
        m, n, c = chunk.shape[0], self.refs.shape[0], self.refs.shape[1]
        out = np.zeros((m, n), dtype=np.float64)
        c_block = 64
        rows_per = max(1, int(96e6 / (n * c_block * 4)))
        buf = np.empty((min(rows_per, m), n, c_block), dtype=np.float32)
        for s in range(0, m, rows_per):
            e = min(s + rows_per, m)
            for cs in range(0, c, c_block):
                ce = min(cs + c_block, c)
                block = buf[: e - s, :, : ce - cs]
                np.subtract(chunk[s:e, None, cs:ce], self.refs[None, :, cs:ce], out=block)
                np.abs(block, out=block)
                out[s:e] += np.einsum("mnc->mn", block)
        return out

    def finalize(self, values: np.ndarray) -> np.ndarray:
        """Map kernel output to float32 distances."""
        if self.metric is Metric.L2:
            return np.sqrt(values).astype(np.float32)
        return values.astype(np.float32)


def pairwise_distances(queries, refs, metric: Metric = Metric.L2) -> np.ndarray:
    """Dense distance matrix, entry (j, i) = dist(query j, reference i).

    Materializes the full M x N float32 matrix; meant for moderate sizes and
    oracle checks. ``knn_scores`` below never holds more than one chunk.
    """
    q = _query_matrix(queries)
    r = _ref_matrix(refs)
    if q.shape[1] != r.shape[1]:
        raise ShapeError(f"channel mismatch: queries C={q.shape[1]}, references C={r.shape[1]}")
    kernel = _DistanceKernel(r, metric)
    return kernel.finalize(kernel.sq_or_distances(q))


def _score_chunk(kernel: _DistanceKernel, chunk: np.ndarray, k: int) -> np.ndarray:
    values = kernel.sq_or_distances(chunk)
    if k < values.shape[1]:
        values = np.partition(values, k - 1, axis=1)[:, :k]
    values.sort(axis=1)
    dists = kernel.finalize(values)
    return np.mean(dists, axis=1, dtype=np.float64).astype(np.float32)


def knn_scores_matrix(queries, refs, cfg: KnnConfig, workers: int = 1) -> np.ndarray:
    """Mean distance to the k nearest references, one score per query row."""
    q = _query_matrix(queries)
    r = _ref_matrix(refs)
    if q.shape[1] != r.shape[1]:
        raise ShapeError(f"channel mismatch: queries C={q.shape[1]}, references C={r.shape[1]}")
    if cfg.k > r.shape[0]:
        raise ConfigurationError(f"k={cfg.k} exceeds reference count N={r.shape[0]}")
    kernel = _DistanceKernel(r, cfg.metric)
    bounds = [(s, min(s + cfg.query_chunk, q.shape[0])) for s in range(0, q.shape[0], cfg.query_chunk)]
    out = np.empty(q.shape[0], dtype=np.float32)
    if workers <= 1 or len(bounds) <= 1:
        for s, e in bounds:
            out[s:e] = _score_chunk(kernel, q[s:e], cfg.k)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [(s, e, pool.submit(_score_chunk, kernel, q[s:e], cfg.k)) for s, e in bounds]
            for s, e, fut in futures:
                out[s:e] = fut.result()
    if not np.isfinite(out).all():
        raise ValidationError("non-finite value in kNN scores")
    return out


def knn_scores(features: FeatureMap, refs, cfg: KnnConfig, workers: int = 1) -> ScoreMap:
    """Score every position of a feature map; output is at feature resolution."""
    scores = knn_scores_matrix(features.as_matrix(), refs, cfg, workers=workers)
    return ScoreMap(scores.reshape(features.height, features.width))


@dataclass(frozen=True)
class BatchScores:
    """Per-image score maps plus the maximum score over the whole batch."""

    score_maps: dict
    max_score: float


def knn_scores_batch(samples, refs, cfg: KnnConfig, workers: int = 1) -> BatchScores:
    """Score a list of dataset samples; any per-sample failure voids the batch."""
    score_maps = {}
    failures = []
    max_score = None
    for sample in samples:
        try:
            fmap = load_feature_map(sample.feature_path)
            smap = knn_scores(fmap, refs, cfg, workers=workers)
        except Exception as exc:  # collected, reported at the end
            failures.append(f"{sample.image_id}: {exc}")
            continue
        score_maps[sample.image_id] = smap
        m = float(smap.data.max())
        max_score = m if max_score is None else max(max_score, m)
    if failures:
        raise DataError("batch scoring failed for: " + "; ".join(failures))
    if not score_maps:
        raise DataError("batch scoring got no samples")
    return BatchScores(score_maps=score_maps, max_score=max_score)
