"""On-disk tensor formats and dataset layout.

Everything the pipeline exchanges between stages lives in NPY v1.0 files
(little-endian, C-contiguous, '<f4' for float tensors and '<i4' for label
tensors) plus small JSON manifests. Loads validate invariants eagerly so the
numerics downstream never see NaNs or mismatched shapes.

Dataset layout::

    root/
      manifest.json              # {"num_classes": K, "ignore_value": 255}
      features/<image_id>.npy    # H_f x W_f x C   float32
      logits/<image_id>.npy      # H   x W   x K   float32
      labels/<image_id>.npy      # H   x W         int32
      ood_masks/<image_id>.npy   # H   x W         int32 {0, 1, ignore}

Reference sets are stored as ``<name>.features.npy`` (+ optional
``<name>.labels.npy``) with a ``<name>.manifest.json`` provenance record.
"""

from __future__ import annotations

import ast
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib import format as npy_format

from .errors import DataError, DtypeError, FormatError, ShapeError, ValidationError

log = logging.getLogger(__name__)

NPY_MAGIC = b"\x93NUMPY"
SUPPORTED_DESCRS = ("<f4", "<i4")

DEFAULT_IGNORE_VALUE = 255

OOD_INLIER = 0
OOD_ANOMALY = 1

FEATURES_DIR = "features"
LOGITS_DIR = "logits"
LABELS_DIR = "labels"
OOD_MASKS_DIR = "ood_masks"

REF_MANIFEST_KEYS = ("n", "c", "metric", "sampling_method", "seed", "source")


def _check_finite(data: np.ndarray, context: str) -> None:
    finite = np.isfinite(data)
    if not finite.all():
        idx = int(np.flatnonzero(~finite.ravel())[0])
        raise ValidationError(f"{context}: non-finite value at flat index {idx}")


def _check_grid(data: np.ndarray, ndim: int, dtype: type, context: str) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != ndim:
        raise ShapeError(f"{context}: expected {ndim}-d array, got shape {data.shape}")
    if any(s <= 0 for s in data.shape):
        raise ShapeError(f"{context}: all dimensions must be positive, got {data.shape}")
    data = np.ascontiguousarray(data, dtype=dtype)
    data.setflags(write=False)
    return data


@dataclass(frozen=True)
class FeatureMap:
    """Grid of local embedding vectors for one image, shape (H_f, W_f, C)."""

    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.data, 3, np.float32, "FeatureMap")
        _check_finite(data, "FeatureMap")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def as_matrix(self) -> np.ndarray:
        """Flatten spatial dims to a (H_f*W_f, C) query matrix."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel class logits at image resolution, shape (H, W, K)."""

    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.data, 3, np.float32, "LogitMap")
        _check_finite(data, "LogitMap")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class labels, shape (H, W); ignore_value marks unlabeled."""

    data: np.ndarray
    ignore_value: int = DEFAULT_IGNORE_VALUE

    def __post_init__(self):
        data = _check_grid(self.data, 2, np.int32, "LabelMask")
        if (data != self.ignore_value).any() and data.min() < 0:
            raise ValidationError("LabelMask: negative label value")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def validate_against(self, num_classes: int) -> None:
        valid = self.data[self.data != self.ignore_value]
        if valid.size and int(valid.max()) >= num_classes:
            raise ValidationError(
                f"LabelMask: label {int(valid.max())} out of range for {num_classes} classes"
            )


@dataclass(frozen=True)
class OodMask:
    """Ground-truth anomaly mask: 0 inlier, 1 anomaly, ignore_value void."""

    data: np.ndarray
    ignore_value: int = DEFAULT_IGNORE_VALUE

    def __post_init__(self):
        data = _check_grid(self.data, 2, np.int32, "OodMask")
        allowed = (data == OOD_INLIER) | (data == OOD_ANOMALY) | (data == self.ignore_value)
        if not allowed.all():
            bad = int(data[~allowed].flat[0])
            raise ValidationError(f"OodMask: unexpected value {bad}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ScoreMap:
    """Scalar anomaly scores on a grid, shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        data = _check_grid(self.data, 2, np.float32, "ScoreMap")
        _check_finite(data, "ScoreMap")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ReferenceSet:
    """In-distribution reference features (N, C) plus provenance manifest."""

    features: np.ndarray
    class_labels: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = _check_grid(self.features, 2, np.float32, "ReferenceSet")
        _check_finite(feats, "ReferenceSet")
        object.__setattr__(self, "features", feats)
        if self.class_labels is not None:
            labels = np.ascontiguousarray(self.class_labels, dtype=np.int32)
            if labels.shape != (feats.shape[0],):
                raise ShapeError(
                    f"ReferenceSet: {labels.shape[0]} labels for {feats.shape[0]} features"
                )
            labels.setflags(write=False)
            object.__setattr__(self, "class_labels", labels)

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def read_npy(path) -> np.ndarray:
    """Read a single NPY v1.0 tensor with strict format checks."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(NPY_MAGIC))
        if magic != NPY_MAGIC:
            raise FormatError(f"{path}: not an NPY file (bad magic {magic!r})")
        version = f.read(2)
        if version != b"\x01\x00":
            raise FormatError(f"{path}: unsupported NPY version {tuple(version)}")
        (header_len,) = struct.unpack("<H", f.read(2))
        header = f.read(header_len)
        if len(header) != header_len:
            raise FormatError(f"{path}: truncated header")
        try:
            meta = ast.literal_eval(header.decode("latin1"))
            descr, fortran, shape = meta["descr"], meta["fortran_order"], meta["shape"]
        except (ValueError, SyntaxError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed NPY header: {exc}") from exc
        if descr not in SUPPORTED_DESCRS:
            raise DtypeError(f"{path}: dtype {descr!r} not supported (want one of {SUPPORTED_DESCRS})")
        if fortran:
            raise FormatError(f"{path}: fortran_order tensors not supported")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.fromfile(f, dtype=np.dtype(descr), count=count)
        if data.size != count:
            raise FormatError(f"{path}: truncated data ({data.size} of {count} elements)")
    return data.reshape(shape)


def write_npy(array: np.ndarray, path) -> None:
    """Write an NPY v1.0 file; bytes are deterministic for given data."""
    path = Path(path)
    array = np.ascontiguousarray(array)
    if array.dtype not in (np.float32, np.int32):
        raise DtypeError(f"refusing to write dtype {array.dtype}; use float32 or int32")
    try:
        with open(path, "wb") as f:
            npy_format.write_array(f, array, version=(1, 0))
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc


def load_tensor(path):
    """Load a tensor file and wrap it in the type implied by its layout.

    3-d float -> FeatureMap, 2-d float -> ScoreMap, 2-d int -> LabelMask.
    Logit and OoD-mask files share layouts with feature maps and label masks;
    use the dedicated loaders below when the distinction matters.
    """
    path = Path(path)
    data = read_npy(path)
    try:
        if data.dtype == np.float32 and data.ndim == 3:
            return FeatureMap(data)
        if data.dtype == np.float32 and data.ndim == 2:
            return ScoreMap(data)
        if data.dtype == np.int32 and data.ndim == 2:
            return LabelMask(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    raise FormatError(f"{path}: unsupported tensor layout {data.dtype}/{data.shape}")


def load_feature_map(path) -> FeatureMap:
    obj = load_tensor(path)
    if not isinstance(obj, FeatureMap):
        raise FormatError(f"{path}: expected a 3-d float tensor")
    return obj


def load_logit_map(path, num_classes: int | None = None) -> LogitMap:
    data = read_npy(path)
    if data.dtype != np.float32 or data.ndim != 3:
        raise FormatError(f"{path}: expected a 3-d float tensor")
    try:
        logits = LogitMap(data)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if num_classes is not None and logits.num_classes != num_classes:
        raise ShapeError(
            f"{path}: {logits.num_classes} classes, manifest declares {num_classes}"
        )
    return logits


def load_label_mask(path, ignore_value: int = DEFAULT_IGNORE_VALUE) -> LabelMask:
    data = read_npy(path)
    if data.dtype != np.int32 or data.ndim != 2:
        raise FormatError(f"{path}: expected a 2-d int tensor")
    return LabelMask(data, ignore_value=ignore_value)


def load_ood_mask(path, ignore_value: int = DEFAULT_IGNORE_VALUE) -> OodMask:
    data = read_npy(path)
    if data.dtype != np.int32 or data.ndim != 2:
        raise FormatError(f"{path}: expected a 2-d int tensor")
    try:
        return OodMask(data, ignore_value=ignore_value)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def load_score_map(path) -> ScoreMap:
    obj = load_tensor(path)
    if not isinstance(obj, ScoreMap):
        raise FormatError(f"{path}: expected a 2-d float tensor")
    return obj


def save_tensor(obj, path) -> None:
    """Write any tensor_store object back to an NPY file."""
    if isinstance(obj, (FeatureMap, LogitMap, LabelMask, OodMask, ScoreMap)):
        write_npy(obj.data, path)
    elif isinstance(obj, np.ndarray):
        write_npy(obj, path)
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")


# --------------------------------------------------------------------------
# Reference sets


def reference_paths(base) -> tuple[Path, Path, Path]:
    base = Path(base)
    if base.name.endswith(".features.npy"):
        base = base.with_name(base.name[: -len(".features.npy")])
    return (
        base.with_name(base.name + ".features.npy"),
        base.with_name(base.name + ".labels.npy"),
        base.with_name(base.name + ".manifest.json"),
    )


def save_reference_set(refs: ReferenceSet, base) -> None:
    feat_path, label_path, manifest_path = reference_paths(base)
    feat_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(refs.manifest)
    manifest["n"] = refs.count
    manifest["c"] = refs.channels
    missing = [k for k in REF_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValidationError(f"reference manifest missing keys: {missing}")
    write_npy(refs.features, feat_path)
    if refs.class_labels is not None:
        write_npy(refs.class_labels, label_path)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_reference_set(base) -> ReferenceSet:
    feat_path, label_path, manifest_path = reference_paths(base)
    if not manifest_path.exists():
        raise FormatError(f"missing reference manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    missing = [k for k in REF_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise FormatError(f"{manifest_path}: missing manifest keys {missing}")
    features = read_npy(feat_path)
    if features.ndim != 2 or features.dtype != np.float32:
        raise FormatError(f"{feat_path}: reference features must be a 2-d float tensor")
    if features.shape != (manifest["n"], manifest["c"]):
        raise ShapeError(
            f"{feat_path}: shape {features.shape} does not match manifest "
            f"({manifest['n']}, {manifest['c']})"
        )
    labels = None
    if label_path.exists():
        labels = read_npy(label_path)
    try:
        return ReferenceSet(features, class_labels=labels, manifest=manifest)
    except (ValidationError, ShapeError) as exc:
        raise type(exc)(f"{feat_path}: {exc}") from exc


# --------------------------------------------------------------------------
# Dataset scanning


@dataclass(frozen=True)
class DatasetManifest:
    num_classes: int
    ignore_value: int = DEFAULT_IGNORE_VALUE


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    feature_path: Path
    logit_path: Path
    label_path: Path | None = None
    ood_mask_path: Path | None = None


@dataclass(frozen=True)
class DatasetScan:
    root: Path
    manifest: DatasetManifest
    samples: tuple[SampleRecord, ...]
    warnings: tuple[str, ...]


def load_dataset_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FormatError(f"missing dataset manifest {path}")
    try:
        raw = json.loads(path.read_text())
        return DatasetManifest(
            num_classes=int(raw["num_classes"]),
            ignore_value=int(raw.get("ignore_value", DEFAULT_IGNORE_VALUE)),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed dataset manifest: {exc}") from exc


def scan_dataset(root) -> DatasetScan:
    """Enumerate samples under a dataset root in deterministic id order.

    A sample needs a feature file and a logit file to be usable; label and
    OoD-mask files are attached when present. Incomplete samples become
    warning entries rather than records, so nothing is silently dropped.
    """
    root = Path(root)
    manifest = load_dataset_manifest(root)
    ids: set[str] = set()
    for sub in (FEATURES_DIR, LOGITS_DIR, LABELS_DIR, OOD_MASKS_DIR):
        d = root / sub
        if d.is_dir():
            ids.update(p.stem for p in d.glob("*.npy"))
    if not ids:
        raise DataError(f"no samples found under {root}")

    samples = []
    warnings = []
    for image_id in sorted(ids):
        feature_path = root / FEATURES_DIR / f"{image_id}.npy"
        logit_path = root / LOGITS_DIR / f"{image_id}.npy"
        missing = [
            name
            for name, p in ((FEATURES_DIR, feature_path), (LOGITS_DIR, logit_path))
            if not p.exists()
        ]
        if missing:
            warnings.append(f"{image_id}: missing {', '.join(missing)}")
            continue
        label_path = root / LABELS_DIR / f"{image_id}.npy"
        ood_path = root / OOD_MASKS_DIR / f"{image_id}.npy"
        samples.append(
            SampleRecord(
                image_id=image_id,
                feature_path=feature_path,
                logit_path=logit_path,
                label_path=label_path if label_path.exists() else None,
                ood_mask_path=ood_path if ood_path.exists() else None,
            )
        )
    for w in warnings:
        log.warning("scan_dataset: %s", w)
    return DatasetScan(root=root, manifest=manifest, samples=tuple(samples), warnings=tuple(warnings))
