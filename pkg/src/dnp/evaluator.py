"""Pixel-level detection metrics: AP, FPR at target TPR, AUROC.

Every metric runs on per-unique-score count pairs, never on raw pixel
arrays: each image collapses to (unique scores, positive counts, negative
counts) and pools merge those triples. This keeps dataset-level pooling
exact while bounded by the number of distinct float32 score values, and it
makes tie handling explicit - all samples sharing a score enter a threshold
step together, the only convention invariant to sample order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError, UndefinedMetricError
from .tensor_store import OodMask, ScoreMap, OOD_ANOMALY, OOD_INLIER

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalReport:
    ap: float
    fpr95: float
    auroc: float
    num_anomaly_pixels: int
    num_inlier_pixels: int
    num_void_pixels: int
    per_image: tuple = field(default=())

    def to_json_dict(self) -> dict:
        out = {
            "ap": self.ap,
            "fpr95": self.fpr95,
            "auroc": self.auroc,
            "num_anomaly_pixels": self.num_anomaly_pixels,
            "num_inlier_pixels": self.num_inlier_pixels,
            "num_void_pixels": self.num_void_pixels,
        }
        if self.per_image:
            out["per_image"] = list(self.per_image)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ScoreCounts:
    """Unique scores (ascending) with positive/negative counts per value."""

    unique: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    @property
    def num_pos(self) -> int:
        return int(self.pos.sum())

    @property
    def num_neg(self) -> int:
        return int(self.neg.sum())


def _as_counts(scores, labels) -> ScoreCounts:
    scores = np.asarray(scores).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    unique, inverse = np.unique(scores, return_inverse=True)
    positive = labels != 0
    pos = np.bincount(inverse[positive], minlength=unique.size).astype(np.int64)
    neg = np.bincount(inverse[~positive], minlength=unique.size).astype(np.int64)
    return ScoreCounts(unique=unique, pos=pos, neg=neg)


def merge_counts(parts: list[ScoreCounts]) -> ScoreCounts:
    if not parts:
        raise DataError("nothing to merge")
    if len(parts) == 1:
        return parts[0]
    all_unique = np.concatenate([p.unique for p in parts])
    all_pos = np.concatenate([p.pos for p in parts])
    all_neg = np.concatenate([p.neg for p in parts])
    unique, inverse = np.unique(all_unique, return_inverse=True)
    pos = np.zeros(unique.size, dtype=np.int64)
    neg = np.zeros(unique.size, dtype=np.int64)
    np.add.at(pos, inverse, all_pos)
    np.add.at(neg, inverse, all_neg)
    return ScoreCounts(unique=unique, pos=pos, neg=neg)


def _require_both_classes(counts: ScoreCounts, context: str) -> None:
    if counts.num_pos == 0 or counts.num_neg == 0:
        raise UndefinedMetricError(
            f"{context}: need both classes, got {counts.num_pos} positive / "
            f"{counts.num_neg} negative"
        )


def _ap_from_counts(counts: ScoreCounts) -> float:
    pos_desc = counts.pos[::-1].astype(np.float64)
    neg_desc = counts.neg[::-1].astype(np.float64)
    tp = np.cumsum(pos_desc)
    fp = np.cumsum(neg_desc)
    precision = tp / (tp + fp)
    # divide by the positive total last so perfect ranking lands exactly on 1.0
    return float(np.sum(pos_desc * precision) / counts.num_pos)


def _fpr_at_tpr_from_counts(counts: ScoreCounts, target_tpr: float) -> float:
    tp = np.cumsum(counts.pos[::-1])
    fp = np.cumsum(counts.neg[::-1])
    tpr = tp / counts.num_pos
    idx = int(np.argmax(tpr >= target_tpr))  # highest threshold reaching the target
    return float(fp[idx] / counts.num_neg)


def _auroc_from_counts(counts: ScoreCounts) -> float:
    neg_below = np.cumsum(counts.neg) - counts.neg  # strictly-lower negatives
    wins = int(np.sum(counts.pos * neg_below))
    ties = int(np.sum(counts.pos * counts.neg))
    return (2 * wins + ties) / (2 * counts.num_pos * counts.num_neg)


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve by the step sum, anomaly positive."""
    counts = _as_counts(scores, labels)
    _require_both_classes(counts, "average_precision")
    return _ap_from_counts(counts)


def fpr_at_tpr(scores, labels, target_tpr: float = 0.95) -> float:
    """False positive rate at the highest threshold with TPR >= target."""
    if not (0.0 < target_tpr <= 1.0):
        raise DataError(f"target_tpr must be in (0, 1], got {target_tpr}")
    counts = _as_counts(scores, labels)
    _require_both_classes(counts, "fpr_at_tpr")
    return _fpr_at_tpr_from_counts(counts, target_tpr)


def auroc(scores, labels) -> float:
    """Probability a random anomaly outranks a random inlier; ties count 0.5."""
    counts = _as_counts(scores, labels)
    _require_both_classes(counts, "auroc")
    return _auroc_from_counts(counts)


def _valid_pixels(smap: ScoreMap, mask: OodMask):
    labels = mask.data
    valid = labels != mask.ignore_value
    return smap.data[valid], (labels[valid] == OOD_ANOMALY).astype(np.int8)


def evaluate_dataset(pairs, image_ids=None, per_image: bool = False) -> EvalReport:
    """Pooled metrics over (ScoreMap, OodMask) pairs.

    Pixels are pooled across the whole collection (not averaged per image);
    void pixels are excluded everywhere. Images lacking one of the classes
    still contribute to the pool but are skipped in the per-image list.
    """
    pairs = list(pairs)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(pairs))]
    if not pairs:
        raise DataError("no score/mask pairs to evaluate")

    parts = []
    per_image_reports = []
    num_void = 0
    for image_id, (smap, mask) in zip(image_ids, pairs):
        if (smap.height, smap.width) != (mask.height, mask.width):
            raise ShapeError(
                f"image {image_id}: scores {(smap.height, smap.width)} vs "
                f"mask {(mask.height, mask.width)}"
            )
        num_void += int((mask.data == mask.ignore_value).sum())
        scores, labels = _valid_pixels(smap, mask)
        if scores.size == 0:
            log.warning("image %s: no valid pixels", image_id)
            continue
        counts = _as_counts(scores, labels)
        parts.append(counts)
        if per_image:
            if counts.num_pos == 0 or counts.num_neg == 0:
                log.info("image %s: single-class, skipped in per-image report", image_id)
                continue
            per_image_reports.append(
                {
                    "image_id": image_id,
                    "ap": _ap_from_counts(counts),
                    "fpr95": _fpr_at_tpr_from_counts(counts, 0.95),
                    "auroc": _auroc_from_counts(counts),
                    "num_anomaly_pixels": counts.num_pos,
                    "num_inlier_pixels": counts.num_neg,
                }
            )
    if not parts:
        raise DataError("no valid pixels in any image")
    pooled = merge_counts(parts)
    _require_both_classes(pooled, "evaluate_dataset")
    return EvalReport(
        ap=_ap_from_counts(pooled),
        fpr95=_fpr_at_tpr_from_counts(pooled, 0.95),
        auroc=_auroc_from_counts(pooled),
        num_anomaly_pixels=pooled.num_pos,
        num_inlier_pixels=pooled.num_neg,
        num_void_pixels=num_void,
        per_image=tuple(per_image_reports),
    )


def format_report(report: EvalReport) -> str:
    """Fixed-order table for CLI output."""
    lines = [
        f"{'AP':<22}{report.ap:.6f}",
        f"{'FPR95':<22}{report.fpr95:.6f}",
        f"{'AUROC':<22}{report.auroc:.6f}",
        f"{'anomaly pixels':<22}{report.num_anomaly_pixels}",
        f"{'inlier pixels':<22}{report.num_inlier_pixels}",
        f"{'void pixels':<22}{report.num_void_pixels}",
    ]
    return "\n".join(lines)
