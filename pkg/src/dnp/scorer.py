"""Parametric anomaly scores, score normalization, and map resampling.

All scores are oriented so that HIGHER means more anomalous; max-logit and
log-sum-exp are therefore negated relative to their raw definitions. The
combined score adds the two channels after scaling each by training-set
extrema: the neighbor score is divided by its training maximum, the
parametric score is min-max normalized. Test scores may exceed the training
extrema and are deliberately not clipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, DegenerateFitError, ShapeError
from .tensor_store import LogitMap, ScoreMap

log = logging.getLogger(__name__)


class ParametricKind(str, Enum):
    MSP = "msp"
    ENTROPY = "entropy"
    MAX_LOGIT = "maxlogit"
    LOGSUMEXP = "lse"

    @classmethod
    def parse(cls, name: str) -> "ParametricKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown parametric kind {name!r}; expected one of {[k.value for k in cls]}"
            ) from None


def parametric_score(logits: LogitMap, kind: ParametricKind) -> ScoreMap:
    """Per-pixel anomaly score from class logits, at logit resolution.

    msp:      1 - max softmax probability
    entropy:  -sum p ln p  (natural log, 0 ln 0 = 0)
    maxlogit: -max logit
    lse:      -ln sum exp(logits), via the max-shift trick
    """
    if logits.num_classes < 2:
        raise ConfigurationError(f"need >= 2 classes, got {logits.num_classes}")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=2)
    if kind is ParametricKind.MAX_LOGIT:
        out = -zmax
    else:
        shifted = np.exp(z - zmax[:, :, None])
        denom = shifted.sum(axis=2)
        if kind is ParametricKind.LOGSUMEXP:
            out = -(zmax + np.log(denom))
        elif kind is ParametricKind.MSP:
            out = 1.0 - shifted.max(axis=2) / denom
        else:  # entropy
            p = shifted / denom[:, :, None]
            plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
            out = -plogp.sum(axis=2)
    return ScoreMap(out.astype(np.float32))


def upsample_bilinear(scores: ScoreMap, target_h: int, target_w: int) -> ScoreMap:
    """Bilinear resampling with half-pixel-center alignment.

    Source coordinate for target index t is (t + 0.5) * (src/target) - 0.5,
    clamped to the valid range, so outputs never extrapolate beyond the
    input extrema.
    """
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target dims must be positive, got ({target_h}, {target_w})")
    if target_h < scores.height or target_w < scores.width:
        raise ShapeError(
            f"target ({target_h}, {target_w}) below source ({scores.height}, {scores.width})"
        )
    src = scores.data.astype(np.float64)

    def axis_coords(target: int, source: int):
        x = (np.arange(target) + 0.5) * (source / target) - 0.5
        np.clip(x, 0.0, source - 1.0, out=x)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, source - 1)
        return lo, hi, x - lo

    r0, r1, wr = axis_coords(target_h, scores.height)
    c0, c1, wc = axis_coords(target_w, scores.width)
    top = src[r0][:, c0] * (1.0 - wc)[None, :] + src[r0][:, c1] * wc[None, :]
    bot = src[r1][:, c0] * (1.0 - wc)[None, :] + src[r1][:, c1] * wc[None, :]
    out = top * (1.0 - wr)[:, None] + bot * wr[:, None]
    return ScoreMap(out.astype(np.float32))


@dataclass(frozen=True)
class NormalizationStats:
    """Training-set extrema used to bring both score channels to one range."""

    knn_max: float
    param_min: float
    param_max: float

    def __post_init__(self):
        if not (np.isfinite(self.knn_max) and self.knn_max > 0):
            raise DegenerateFitError(f"knn_max must be finite and > 0, got {self.knn_max}")
        if not (np.isfinite(self.param_min) and np.isfinite(self.param_max)):
            raise DegenerateFitError("parametric extrema must be finite")
        if self.param_max <= self.param_min:
            raise DegenerateFitError(
                f"degenerate parametric extrema: min {self.param_min} max {self.param_max}"
            )


def fit_normalization(knn_scores_stream, param_scores_stream) -> NormalizationStats:
    """Scan two score streams (iterables of arrays or floats) for extrema.

    Chunking never changes the result: extrema merge associatively.
    """
    knn_max = None
    for chunk in knn_scores_stream:
        arr = np.asarray(chunk, dtype=np.float64)
        if arr.size == 0:
            continue
        m = float(arr.max())
        knn_max = m if knn_max is None else max(knn_max, m)
    p_min = p_max = None
    for chunk in param_scores_stream:
        arr = np.asarray(chunk, dtype=np.float64)
        if arr.size == 0:
            continue
        lo, hi = float(arr.min()), float(arr.max())
        p_min = lo if p_min is None else min(p_min, lo)
        p_max = hi if p_max is None else max(p_max, hi)
    if knn_max is None or p_min is None:
        raise DataError("cannot fit normalization on empty score streams")
    return NormalizationStats(knn_max=knn_max, param_min=p_min, param_max=p_max)


def combine_scores(s_knn: ScoreMap, s_param: ScoreMap, stats: NormalizationStats) -> ScoreMap:
    """Sum of the scaled channels; values outside [0, 1] are kept as-is.

    The neighbor channel is scaled by division only (no minimum subtracted);
    the parametric channel is min-max normalized.
    """
    if (s_knn.height, s_knn.width) != (s_param.height, s_param.width):
        raise ShapeError(
            f"score resolution mismatch: kNN {(s_knn.height, s_knn.width)} "
            f"vs parametric {(s_param.height, s_param.width)}"
        )
    knn_norm = s_knn.data.astype(np.float64) / stats.knn_max
    span = stats.param_max - stats.param_min
    param_norm = (s_param.data.astype(np.float64) - stats.param_min) / span
    return ScoreMap((knn_norm + param_norm).astype(np.float32))


# --------------------------------------------------------------------------
# Stats serialization (JSON with provenance binding)


def manifest_hash(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_stats(
    stats: NormalizationStats,
    path,
    parametric_kind: ParametricKind,
    ref_manifest_hash: str,
) -> None:
    payload = {
        "knn_max": stats.knn_max,
        "param_min": stats.param_min,
        "param_max": stats.param_max,
        "parametric_kind": parametric_kind.value,
        "ref_manifest_hash": ref_manifest_hash,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_stats(path) -> tuple[NormalizationStats, ParametricKind, str]:
    raw = json.loads(Path(path).read_text())
    stats = NormalizationStats(
        knn_max=float(raw["knn_max"]),
        param_min=float(raw["param_min"]),
        param_max=float(raw["param_max"]),
    )
    return stats, ParametricKind.parse(raw["parametric_kind"]), raw["ref_manifest_hash"]


def render_scoremap_png(scores: ScoreMap, path) -> None:
    """Visualization only: min-max stretch the map and write an 8-bit PNG
    under a fixed perceptual colormap. Never feed these bytes back into
    metrics."""
    from matplotlib import colormaps
    from PIL import Image

    data = scores.data.astype(np.float64)
    span = data.max() - data.min()
    normed = (data - data.min()) / span if span > 0 else np.zeros_like(data)
    rgba = colormaps["magma"](normed)
    rgb = (rgba[:, :, :3] * 255.0).round().astype(np.uint8)
    try:
        Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG")
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc
