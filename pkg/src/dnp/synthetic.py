"""Synthetic dataset with controlled geometry for end-to-end checks.

Inlier features come from three well-separated Gaussian clusters (one per
semantic class, centers >= 10 apart, sigma 0.5); anomalous features come
from a fourth cluster at distance >= 20 from every inlier center. With that
geometry the nearest-neighbor score separates anomaly pixels from inlier
pixels almost perfectly, which pins down the expected metrics.

Each image is a grid of feature cells upscaled by an integer factor to image
resolution. Test images carry a rectangular anomaly patch; a one-cell ring
around the patch boundary is marked void so that interpolation blur at the
transition does not enter the metrics (the convention of the driving-scene
benchmarks this mirrors).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .tensor_store import (
    DEFAULT_IGNORE_VALUE,
    FEATURES_DIR,
    LABELS_DIR,
    LOGITS_DIR,
    OOD_MASKS_DIR,
    write_npy,
)

NUM_CLASSES = 3
INLIER_SPACING = 10.0
OOD_DISTANCE = 30.0
CLUSTER_SIGMA = 0.5
LOGIT_SCALE = 6.0
LOGIT_NOISE = 0.3


@dataclass(frozen=True)
class SynthSpec:
    grid_h: int = 24
    grid_w: int = 32
    upscale: int = 4
    channels: int = 16
    num_train: int = 6
    num_test: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.channels < 4:
            raise ConfigurationError("need >= 4 channels to place the anomaly cluster")
        if self.grid_h < 8 or self.grid_w < 8:
            raise ConfigurationError("feature grid must be at least 8x8")
        if self.upscale < 1:
            raise ConfigurationError("upscale must be >= 1")


def _cluster_centers(channels: int) -> tuple[np.ndarray, np.ndarray]:
    inlier = np.zeros((NUM_CLASSES, channels))
    for c in range(NUM_CLASSES):
        inlier[c, c] = INLIER_SPACING
    ood = np.zeros(channels)
    ood[NUM_CLASSES] = OOD_DISTANCE
    return inlier, ood


def _upscale(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def _logits_for(labels_full: np.ndarray, anomalous_full: np.ndarray, rng) -> np.ndarray:
    h, w = labels_full.shape
    logits = LOGIT_NOISE * rng.standard_normal((h, w, NUM_CLASSES))
    rows, cols = np.nonzero(~anomalous_full)
    logits[rows, cols, labels_full[rows, cols]] += LOGIT_SCALE
    return logits.astype(np.float32)


def _write_image(root: Path, image_id: str, arrays: dict) -> None:
    for sub, data in arrays.items():
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        write_npy(data, d / f"{image_id}.npy")


def generate_dataset(root, spec: SynthSpec) -> None:
    """Write train/ and test/ datasets under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(spec.seed)
    inlier_centers, ood_center = _cluster_centers(spec.channels)

    for split, count in (("train", spec.num_train), ("test", spec.num_test)):
        split_root = root / split
        split_root.mkdir(parents=True, exist_ok=True)
        manifest = {"num_classes": NUM_CLASSES, "ignore_value": DEFAULT_IGNORE_VALUE}
        (split_root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for i in range(count):
            image_id = f"{split}_{i:04d}"
            arrays = _make_image(spec, rng, inlier_centers, ood_center, split == "test")
            _write_image(split_root, image_id, arrays)


def _make_image(spec: SynthSpec, rng, inlier_centers, ood_center, with_anomaly: bool) -> dict:
    gh, gw, s = spec.grid_h, spec.grid_w, spec.upscale
    class_grid = rng.integers(0, NUM_CLASSES, size=(gh, gw))
    features = inlier_centers[class_grid] + CLUSTER_SIGMA * rng.standard_normal(
        (gh, gw, spec.channels)
    )

    anomaly_cells = np.zeros((gh, gw), dtype=bool)
    void_cells = np.zeros((gh, gw), dtype=bool)
    if with_anomaly:
        rh = min(int(rng.integers(4, max(5, gh // 2 + 1))), gh - 4)
        rw = min(int(rng.integers(4, max(5, gw // 2 + 1))), gw - 4)
        r0 = int(rng.integers(1, gh - rh - 1))
        c0 = int(rng.integers(1, gw - rw - 1))
        rect = np.zeros((gh, gw), dtype=bool)
        rect[r0 : r0 + rh, c0 : c0 + rw] = True
        core = np.zeros((gh, gw), dtype=bool)
        core[r0 + 1 : r0 + rh - 1, c0 + 1 : c0 + rw - 1] = True
        ring = np.zeros((gh, gw), dtype=bool)
        ring[max(r0 - 1, 0) : r0 + rh + 1, max(c0 - 1, 0) : c0 + rw + 1] = True
        features[rect] = ood_center + CLUSTER_SIGMA * rng.standard_normal(
            (int(rect.sum()), spec.channels)
        )
        anomaly_cells = core
        void_cells = ring & ~core

    labels_cells = class_grid.copy()
    labels_cells[anomaly_cells | void_cells] = DEFAULT_IGNORE_VALUE
    labels_full = _upscale(labels_cells, s).astype(np.int32)
    class_full = _upscale(class_grid, s)
    anomalous_full = _upscale(anomaly_cells | void_cells, s)
    logits = _logits_for(class_full, anomalous_full, rng)

    mask_cells = np.zeros((gh, gw), dtype=np.int32)
    mask_cells[void_cells] = DEFAULT_IGNORE_VALUE
    mask_cells[anomaly_cells] = 1
    mask_full = _upscale(mask_cells, s).astype(np.int32)

    return {
        FEATURES_DIR: features.astype(np.float32),
        LOGITS_DIR: logits,
        LABELS_DIR: labels_full,
        OOD_MASKS_DIR: mask_full,
    }
