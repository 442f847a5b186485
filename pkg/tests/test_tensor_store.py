import json

import numpy as np
import pytest

from dnp import tensor_store as ts
from dnp.errors import DataError, DtypeError, FormatError, ShapeError, ValidationError


def write_raw(path, array):
    from numpy.lib import format as npy_format

    with open(path, "wb") as f:
        npy_format.write_array(f, array, version=(1, 0))


class TestLoadSave:
    def test_zero_feature_map_round_trip(self, tmp_path):
        path = tmp_path / "t.npy"
        ts.save_tensor(ts.FeatureMap(np.zeros((2, 2, 3), np.float32)), path)
        obj = ts.load_tensor(path)
        assert isinstance(obj, ts.FeatureMap)
        assert (obj.height, obj.width, obj.channels) == (2, 2, 3)
        assert np.all(obj.data == 0)

    def test_nan_reported_with_flat_index(self, tmp_path):
        data = np.zeros((2, 2, 3), np.float32)
        data.flat[5] = np.nan
        path = tmp_path / "bad.npy"
        write_raw(path, data)
        with pytest.raises(ValidationError, match="index 5"):
            ts.load_tensor(path)

    def test_byte_identical_round_trip(self, tmp_path, rng):
        path = tmp_path / "a.npy"
        ts.save_tensor(ts.FeatureMap(rng.random((7, 5, 16), dtype=np.float32)), path)
        original = path.read_bytes()
        reloaded = ts.load_tensor(path)
        path2 = tmp_path / "b.npy"
        ts.save_tensor(reloaded, path2)
        assert path2.read_bytes() == original

    def test_single_element_map(self, tmp_path):
        path = tmp_path / "one.npy"
        ts.save_tensor(ts.ScoreMap(np.array([[0.0]], np.float32)), path)
        assert np.array_equal(ts.load_tensor(path).data, [[0.0]])

    @pytest.mark.parametrize("trial", range(5))
    def test_random_tensors_round_trip(self, tmp_path, rng, trial):
        # 200 tensors per trial across float/int layouts, all exact round-trips
        for i in range(200):
            path = tmp_path / f"t{i}.npy"
            if i % 3 == 2:
                data = rng.integers(0, 50, size=(rng.integers(1, 9), rng.integers(1, 9))).astype(np.int32)
                write_raw(path, data)
                out = ts.load_tensor(path).data
            else:
                shape = tuple(int(rng.integers(1, 7)) for _ in range(3 if i % 3 == 0 else 2))
                data = rng.standard_normal(shape).astype(np.float32)
                write_raw(path, data)
                out = ts.load_tensor(path).data
            assert out.dtype == data.dtype
            assert np.array_equal(out, data)

    def test_bad_magic_is_format_error(self, tmp_path):
        path = tmp_path / "x.npy"
        path.write_bytes(b"NOTNUMPYDATA")
        with pytest.raises(FormatError, match="magic"):
            ts.load_tensor(path)

    def test_wrong_dtype_is_dtype_error(self, tmp_path):
        path = tmp_path / "f8.npy"
        np.save(path, np.zeros((2, 2)))
        with pytest.raises(DtypeError):
            ts.load_tensor(path)

    def test_fortran_order_rejected(self, tmp_path):
        path = tmp_path / "f.npy"
        np.save(path, np.asfortranarray(np.zeros((3, 4), np.float32)))
        with pytest.raises(FormatError, match="fortran"):
            ts.load_tensor(path)

    def test_truncated_data_rejected(self, tmp_path):
        path = tmp_path / "t.npy"
        write_raw(path, np.zeros((4, 4), np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match="truncated"):
            ts.load_tensor(path)

    def test_loaded_arrays_are_immutable(self, tmp_path):
        path = tmp_path / "t.npy"
        ts.save_tensor(ts.ScoreMap(np.ones((2, 2), np.float32)), path)
        obj = ts.load_tensor(path)
        with pytest.raises(ValueError):
            obj.data[0, 0] = 5.0


class TestTypes:
    def test_feature_map_shape_validation(self):
        with pytest.raises(ShapeError):
            ts.FeatureMap(np.zeros((2, 2), np.float32))

    def test_ood_mask_value_validation(self):
        with pytest.raises(ValidationError):
            ts.OodMask(np.array([[0, 7]], np.int32))
        mask = ts.OodMask(np.array([[0, 1], [255, 0]], np.int32))
        assert mask.height == 2

    def test_label_mask_range_check(self):
        mask = ts.LabelMask(np.array([[0, 3], [255, 1]], np.int32))
        mask.validate_against(4)
        with pytest.raises(ValidationError):
            mask.validate_against(3)

    def test_reference_set_label_length(self):
        with pytest.raises(ShapeError):
            ts.ReferenceSet(np.zeros((4, 2), np.float32), class_labels=np.zeros(3, np.int32))


class TestReferenceSetIo:
    def manifest(self):
        return {"metric": "l2", "sampling_method": "random", "seed": 3, "source": "unit"}

    def test_round_trip_with_labels(self, tmp_path, rng):
        refs = ts.ReferenceSet(
            rng.random((10, 4), dtype=np.float32),
            class_labels=rng.integers(0, 3, 10).astype(np.int32),
            manifest=self.manifest(),
        )
        ts.save_reference_set(refs, tmp_path / "r")
        out = ts.load_reference_set(tmp_path / "r")
        assert np.array_equal(out.features, refs.features)
        assert np.array_equal(out.class_labels, refs.class_labels)
        assert out.manifest["n"] == 10 and out.manifest["c"] == 4

    def test_round_trip_without_labels(self, tmp_path, rng):
        refs = ts.ReferenceSet(rng.random((5, 2), dtype=np.float32), manifest=self.manifest())
        ts.save_reference_set(refs, tmp_path / "r")
        assert ts.load_reference_set(tmp_path / "r").class_labels is None

    def test_missing_manifest_key_rejected(self, tmp_path, rng):
        refs = ts.ReferenceSet(rng.random((5, 2), dtype=np.float32), manifest={"metric": "l2"})
        with pytest.raises(ValidationError, match="missing keys"):
            ts.save_reference_set(refs, tmp_path / "r")

    def test_manifest_shape_mismatch_detected(self, tmp_path, rng):
        refs = ts.ReferenceSet(rng.random((5, 2), dtype=np.float32), manifest=self.manifest())
        ts.save_reference_set(refs, tmp_path / "r")
        meta = json.loads((tmp_path / "r.manifest.json").read_text())
        meta["n"] = 6
        (tmp_path / "r.manifest.json").write_text(json.dumps(meta))
        with pytest.raises(ShapeError):
            ts.load_reference_set(tmp_path / "r")


def make_dataset(root, ids, skip_logits=()):
    for sub in (ts.FEATURES_DIR, ts.LOGITS_DIR, ts.LABELS_DIR, ts.OOD_MASKS_DIR):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({"num_classes": 3, "ignore_value": 255}))
    for image_id in ids:
        write_raw(root / ts.FEATURES_DIR / f"{image_id}.npy", np.zeros((2, 2, 4), np.float32))
        if image_id not in skip_logits:
            write_raw(root / ts.LOGITS_DIR / f"{image_id}.npy", np.zeros((4, 4, 3), np.float32))
        write_raw(root / ts.LABELS_DIR / f"{image_id}.npy", np.zeros((4, 4), np.int32))


class TestScanDataset:
    def test_complete_samples_in_sorted_order(self, tmp_path):
        make_dataset(tmp_path, ["c", "a", "b"])
        scan = ts.scan_dataset(tmp_path)
        assert [s.image_id for s in scan.samples] == ["a", "b", "c"]
        assert scan.warnings == ()
        assert scan.manifest.num_classes == 3

    def test_missing_logit_becomes_warning(self, tmp_path):
        make_dataset(tmp_path, ["a", "b", "c"], skip_logits={"b"})
        scan = ts.scan_dataset(tmp_path)
        assert [s.image_id for s in scan.samples] == ["a", "c"]
        assert len(scan.warnings) == 1 and "b" in scan.warnings[0]

    def test_scan_independent_of_creation_order(self, tmp_path):
        make_dataset(tmp_path / "d1", ["x", "m", "a"])
        make_dataset(tmp_path / "d2", ["a", "x", "m"])
        ids1 = [s.image_id for s in ts.scan_dataset(tmp_path / "d1").samples]
        ids2 = [s.image_id for s in ts.scan_dataset(tmp_path / "d2").samples]
        assert ids1 == ids2 == ["a", "m", "x"]

    def test_empty_dataset_is_error(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"num_classes": 2}))
        with pytest.raises(DataError, match="no samples"):
            ts.scan_dataset(tmp_path)

    def test_missing_manifest_is_error(self, tmp_path):
        (tmp_path / ts.FEATURES_DIR).mkdir()
        with pytest.raises(FormatError, match="manifest"):
            ts.scan_dataset(tmp_path)
