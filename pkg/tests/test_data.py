import json

import numpy as np
import pytest

from pairzsl.data import (
    SyntheticSpec,
    ZslDataset,
    generate_synthetic,
    generate_synthetic_full,
    load_dataset,
    load_manifest,
    load_matrix_csv,
    load_matrix_mtxb,
    matrix_from_bytes,
    matrix_to_bytes,
    save_dataset,
    save_matrix_csv,
    save_matrix_mtxb,
    standardize_features,
)
from pairzsl.errors import DatasetError, FormatError
from pairzsl.numerics import row_stats
from pairzsl.rng import RngState


class TestMtxb:
    def test_round_trip_is_bit_exact(self, tmp_path):
        x = RngState(0).normals((7, 5))
        x[0, 0] = -0.0  # signed zero survives
        path = tmp_path / "m.mtxb"
        save_matrix_mtxb(path, x)
        back = load_matrix_mtxb(path)
        assert back.shape == x.shape
        assert x.tobytes() == back.tobytes()

    def test_2x2_file_is_45_bytes(self, tmp_path):
        path = tmp_path / "m.mtxb"
        save_matrix_mtxb(path, np.ones((2, 2)))
        assert path.stat().st_size == 45

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            matrix_from_bytes(b"XXXX" + bytes(20))

    def test_bad_version(self):
        blob = bytearray(matrix_to_bytes(np.ones((1, 1))))
        blob[4] = 9
        with pytest.raises(FormatError, match="version"):
            matrix_from_bytes(bytes(blob))

    def test_truncation_detected(self):
        blob = matrix_to_bytes(np.ones((3, 3)))
        with pytest.raises(FormatError, match="expected"):
            matrix_from_bytes(blob[:-8])

    def test_short_header_detected(self):
        with pytest.raises(FormatError, match="truncated"):
            matrix_from_bytes(b"MTXB\x01")


class TestCsv:
    def test_round_trip_exact_for_float64(self, tmp_path):
        x = RngState(1).normals((6, 4)) * 1e6
        path = tmp_path / "m.csv"
        save_matrix_csv(path, x)
        back = load_matrix_csv(path)
        assert np.abs(back - x).max() <= 1e-15 * np.abs(x).max()
        assert np.array_equal(back, x)  # 17 significant digits round-trip exactly

    def test_ragged_rows_name_the_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3\n4,5\n")
        with pytest.raises(FormatError, match="line 2"):
            load_matrix_csv(path)

    def test_non_numeric_token_names_position(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2\n3,zap\n")
        with pytest.raises(FormatError, match="line 2, column 2"):
            load_matrix_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(FormatError, match="empty"):
            load_matrix_csv(path)


def _write_style_dataset(tmp_path, k_s, k_t, r, d=8, per_class=2):
    """A structurally valid dataset with the given category/attribute sizes."""
    rng = RngState(5)
    ds = ZslDataset(
        source_features=rng.normals((k_s * per_class, d)),
        source_labels=np.repeat(np.arange(k_s), per_class),
        target_features=rng.normals((k_t * per_class, d)),
        target_labels=np.repeat(np.arange(k_t), per_class),
        source_attributes=rng.uniforms((k_s, r)),
        target_attributes=rng.uniforms((k_t, r)),
        source_class_names=[f"s{i}" for i in range(k_s)],
        target_class_names=[f"t{i}" for i in range(k_t)],
    )
    return save_dataset(tmp_path, ds, name="style-check", split="SS")


class TestManifest:
    def test_awa_style_dimensions_validate(self, tmp_path):
        manifest = _write_style_dataset(tmp_path, k_s=40, k_t=10, r=85)
        ds = load_dataset(manifest)
        assert ds.k_s == 40 and ds.k_t == 10 and ds.r == 85

    def test_cub_style_dimensions_validate(self, tmp_path):
        manifest = _write_style_dataset(tmp_path, k_s=150, k_t=50, r=312, per_class=1)
        ds = load_dataset(manifest)
        assert ds.k_s + ds.k_t == 200 and ds.r == 312

    def test_declared_width_mismatch_names_block(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=3, k_t=2, r=4, d=8)
        doc = json.loads(manifest_path.read_text())
        doc["dims"]["d"] = 9
        manifest_path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="source_features.*9"):
            load_dataset(manifest_path)

    def test_unknown_keys_rejected(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=2, k_t=2, r=3)
        doc = json.loads(manifest_path.read_text())
        doc["surprise"] = 1
        manifest_path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="surprise"):
            load_manifest(manifest_path)

    def test_bad_split_rejected(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=2, k_t=2, r=3)
        doc = json.loads(manifest_path.read_text())
        doc["split"] = "XX"
        manifest_path.write_text(json.dumps(doc))
        with pytest.raises(DatasetError, match="split"):
            load_manifest(manifest_path)

    def test_label_out_of_range_names_block(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=2, k_t=2, r=3)
        bad = np.array([[0.0], [5.0], [0.0], [1.0]])
        save_matrix_mtxb(tmp_path / "target_labels.mtxb", bad)
        with pytest.raises(DatasetError, match="target_labels"):
            load_dataset(manifest_path)

    def test_missing_file_names_block(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=2, k_t=2, r=3)
        (tmp_path / "source_attributes.mtxb").unlink()
        with pytest.raises(DatasetError, match="source_attributes"):
            load_dataset(manifest_path)

    def test_train_view_hides_target_labels(self, tmp_path):
        manifest_path = _write_style_dataset(tmp_path, k_s=2, k_t=2, r=3)
        ds = load_dataset(manifest_path)
        view = ds.train_view()
        assert not hasattr(view, "target_labels")


class TestSyntheticGenerator:
    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(seed=3)
        a = generate_synthetic(spec)
        b = generate_synthetic(SyntheticSpec(seed=3))
        assert a.source_features.tobytes() == b.source_features.tobytes()
        assert a.target_features.tobytes() == b.target_features.tobytes()
        assert a.source_attributes.tobytes() == b.source_attributes.tobytes()

    def test_attribute_vectors_distinct_and_binary(self):
        ds = generate_synthetic(SyntheticSpec(seed=4))
        attrs = np.vstack([ds.source_attributes, ds.target_attributes])
        assert set(np.unique(attrs)) <= {0.0, 1.0}
        assert len({row.tobytes() for row in attrs}) == attrs.shape[0]

    def test_continuous_attributes(self):
        ds = generate_synthetic(
            SyntheticSpec(attribute_style="continuous", seed=5)
        )
        attrs = ds.source_attributes
        assert ((attrs >= 0) & (attrs < 1)).all()
        assert len(np.unique(attrs)) > attrs.shape[0]

    def test_identity_shift_relates_affinely_to_shifted(self):
        base = SyntheticSpec(seed=6, shift_scale=1.0, shift_offset=0.0)
        shifted = SyntheticSpec(seed=6, shift_scale=1.5, shift_offset=1.0)
        a = generate_synthetic(base)
        b = generate_synthetic(shifted)
        assert np.array_equal(b.target_features, a.target_features * 1.5 + 1.0)
        assert np.array_equal(a.source_features, b.source_features)

    def test_zero_noise_gives_exact_prototypes(self):
        spec = SyntheticSpec(
            source_classes=3,
            target_classes=2,
            feature_dim=6,
            attribute_dim=4,
            samples_per_class=3,
            noise_scale=0.0,
            shift_scale=1.0,
            shift_offset=0.0,
            seed=7,
        )
        ds, truth = generate_synthetic_full(spec)
        for c in range(3):
            block = ds.source_features[c * 3 : (c + 1) * 3]
            assert np.array_equal(block, np.tile(truth.source_prototypes[c], (3, 1)))

    def test_nearest_prototype_oracle_after_inverting_shift(self):
        ds, truth = generate_synthetic_full(SyntheticSpec(seed=8))
        x = (ds.target_features - truth.shift_offset) / truth.shift_scale
        d2 = ((x[:, None, :] - truth.target_prototypes[None, :, :]) ** 2).sum(axis=2)
        accuracy = (d2.argmin(axis=1) == ds.target_labels).mean()
        assert accuracy > 0.9

    def test_disjoint_class_index_spaces(self):
        ds = generate_synthetic(SyntheticSpec(seed=9))
        assert ds.source_labels.max() < ds.k_s
        assert ds.target_labels.max() < ds.k_t
        assert set(ds.source_class_names).isdisjoint(ds.target_class_names)

    def test_impossible_binary_distinctness_rejected(self):
        spec = SyntheticSpec(
            source_classes=3, target_classes=2, attribute_dim=2, seed=0
        )
        with pytest.raises(DatasetError, match="distinct"):
            spec.validate()

    def test_invalid_counts_rejected(self):
        with pytest.raises(DatasetError):
            SyntheticSpec(target_classes=0).validate()

    def test_shift_vector_length_validated(self):
        spec = SyntheticSpec(shift_scale=[1.0, 2.0], seed=0)
        with pytest.raises(DatasetError, match="shift_scale"):
            generate_synthetic(spec)


class TestStandardize:
    def test_source_block_becomes_zero_mean_unit_variance(self, tiny_dataset):
        out = standardize_features(tiny_dataset)
        mean, var = row_stats(out.source_features)
        assert np.abs(mean).max() < 1e-12
        assert np.abs(var - 1.0).max() < 1e-12

    def test_idempotent_on_source_block(self, tiny_dataset):
        once = standardize_features(tiny_dataset)
        twice = standardize_features(once)
        assert np.abs(twice.source_features - once.source_features).max() < 1e-12

    def test_target_keeps_injected_shift(self, tiny_dataset):
        out = standardize_features(tiny_dataset)
        mean, _ = row_stats(out.target_features)
        assert np.abs(mean).max() > 0.1  # the domain gap survives source-fit scaling

    def test_zero_variance_column_passes_through(self, caplog):
        import logging

        ds = generate_synthetic(
            SyntheticSpec(
                source_classes=2,
                target_classes=2,
                feature_dim=4,
                attribute_dim=3,
                samples_per_class=4,
                seed=11,
            )
        )
        ds.source_features[:, 2] = 7.0
        with caplog.at_level(logging.WARNING, logger="pairzsl.data"):
            out = standardize_features(ds)
        assert np.array_equal(out.source_features[:, 2], ds.source_features[:, 2])
        assert any("zero-variance" in rec.message for rec in caplog.records)

    def test_returns_new_object_and_preserves_labels(self, tiny_dataset):
        out = standardize_features(tiny_dataset)
        assert out is not tiny_dataset
        assert np.array_equal(out.source_labels, tiny_dataset.source_labels)
        assert np.array_equal(out.target_labels, tiny_dataset.target_labels)


class TestNormalizeAttributes:
    def test_rows_become_unit_norm(self, tiny_dataset):
        from pairzsl.data import normalize_attribute_rows

        out = normalize_attribute_rows(tiny_dataset)
        for block in (out.source_attributes, out.target_attributes):
            norms = np.sqrt((block**2).sum(axis=1))
            assert np.abs(norms - 1.0).max() < 1e-12

    def test_zero_rows_pass_through(self, caplog):
        import logging

        from pairzsl.data import normalize_attribute_rows

        ds = generate_synthetic(
            SyntheticSpec(
                source_classes=2,
                target_classes=2,
                feature_dim=4,
                attribute_dim=3,
                samples_per_class=4,
                attribute_style="continuous",
                seed=12,
            )
        )
        ds.source_attributes[0] = 0.0
        with caplog.at_level(logging.WARNING, logger="pairzsl.data"):
            out = normalize_attribute_rows(ds)
        assert np.array_equal(out.source_attributes[0], np.zeros(3))

    def test_disabled_by_default_in_config(self):
        from pairzsl.cli import parse_run_config

        assert parse_run_config({}).normalize_attributes is False
