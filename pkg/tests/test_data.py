import numpy as np
import pytest

from barlow_adaptor.data import (DatasetFormatError, LabeledDataset, ShiftConfig, UnlabeledDataset,
                                 apply_normalization, dataset_to_csv, default_shift_config, fit_normalization,
                                 generate_synthetic_shift, load_dataset, normalize_domain, null_shift_config,
                                 save_dataset)
from barlow_adaptor.losses import coral_forward

SMALL = dict(num_classes=3, dim=4, train_per_class=10, val_per_class=4, test_per_class=6)


class TestDatasets:
    def test_labeled_validation(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((3, 2)), "train", np.array([0, 1]), 2)
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), "train", np.array([0, 2]), 2)

    def test_unlabeled_view_drops_labels(self):
        ds = LabeledDataset(np.ones((2, 3)), "train", np.array([0, 1]), 2)
        view = ds.unlabeled()
        assert type(view) is UnlabeledDataset and not hasattr(view, "y")
        np.testing.assert_array_equal(view.x, ds.x)


class TestNormalization:
    def test_self_normalized_means(self):
        x = np.random.default_rng(0).normal(size=(50, 4)) * 7 + 3
        ds = apply_normalization(UnlabeledDataset(x, "train"), fit_normalization(UnlabeledDataset(x, "train")))
        assert np.all(np.abs(ds.x.mean(axis=0)) < 1e-6)
        np.testing.assert_allclose(ds.x.std(axis=0), 1.0)

    def test_constant_column(self):
        x = np.column_stack([np.full(5, 4.0), np.arange(5.0)])
        ds = apply_normalization(UnlabeledDataset(x, "train"), fit_normalization(UnlabeledDataset(x, "train")))
        np.testing.assert_array_equal(ds.x[:, 0], 0)

    def test_cross_domain_stats_reveal_shift(self):
        src, tgt = generate_synthetic_shift(default_shift_config(0), np.float64)
        moved = apply_normalization(tgt["train"], fit_normalization(src["train"]))
        assert np.abs(moved.x.mean(axis=0)).max() > 0.5

    def test_domain_uses_own_train_stats(self):
        src, _ = generate_synthetic_shift(ShiftConfig(**SMALL), np.float64)
        norm = normalize_domain(src)
        assert np.abs(norm["train"].x.mean(axis=0)).max() < 1e-9
        assert np.abs(norm["test"].x.mean(axis=0)).max() > 1e-6

    def test_dim_mismatch(self):
        stats = fit_normalization(UnlabeledDataset(np.ones((3, 2)), "train"))
        with pytest.raises(ValueError):
            apply_normalization(UnlabeledDataset(np.ones((3, 4)), "train"), stats)


class TestGenerator:
    def test_deterministic(self):
        a = generate_synthetic_shift(ShiftConfig(**SMALL, seed=5))
        b = generate_synthetic_shift(ShiftConfig(**SMALL, seed=5))
        for da, db in zip(a, b):
            for k in da:
                assert dataset_to_csv(da[k]) == dataset_to_csv(db[k])

    def test_class_balanced_sizes(self):
        src, tgt = generate_synthetic_shift(ShiftConfig(**SMALL))
        for dom in (src, tgt):
            assert [len(dom[k]) for k in ("train", "val", "test")] == [30, 12, 18]
            np.testing.assert_array_equal(np.bincount(dom["train"].y), [10, 10, 10])

    def test_singular_operator(self):
        with pytest.raises(ValueError, match="singular"):
            ShiftConfig(**SMALL, scale=0.0)

    def test_translation_leaves_covariance(self):
        moved = generate_synthetic_shift(null_shift_config(0, translation=4.0), np.float64)
        still = generate_synthetic_shift(null_shift_config(0), np.float64)
        gap = np.linalg.norm(moved[1]["train"].x.mean(axis=0) - moved[0]["train"].x.mean(axis=0))
        assert gap > 15
        c_moved = coral_forward(moved[0]["train"].x, moved[1]["train"].x)[0]
        c_still = coral_forward(still[0]["train"].x, still[1]["train"].x)[0]
        assert abs(c_moved - c_still) < 1e-9 and c_moved < 0.01

    def test_default_shift_moves_covariance(self):
        src, tgt = generate_synthetic_shift(default_shift_config(0), np.float64)
        assert coral_forward(src["train"].x, tgt["train"].x)[0] > 1.0

    def test_explicit_geometry(self):
        means = np.eye(3, 4).tolist()
        factors = np.stack([np.eye(4) * 1e-9] * 3).tolist()
        src, _ = generate_synthetic_shift(ShiftConfig(**SMALL, class_means=means, class_cov_factors=factors),
                                          np.float64)
        np.testing.assert_allclose(src["train"].x, np.eye(3, 4)[src["train"].y], atol=1e-7)

    def test_config_round_trip(self, tmp_path):
        cfg = ShiftConfig(**SMALL, seed=3, scale=[1.0, 2.0, 1.0, 0.5])
        cfg.save(tmp_path / "s.json")
        assert ShiftConfig.load(tmp_path / "s.json") == cfg
        with pytest.raises(ValueError, match="unknown"):
            ShiftConfig.from_dict({"dims": 3})


class TestCSV:
    def test_round_trip(self, tmp_path):
        src, _ = generate_synthetic_shift(ShiftConfig(**SMALL))
        save_dataset(src["val"], tmp_path / "v.csv")
        back = load_dataset(tmp_path / "v.csv", num_classes=3, split="val")
        np.testing.assert_array_equal(back.x, src["val"].x)
        np.testing.assert_array_equal(back.y, src["val"].y)
        assert back.num_classes == 3

    def test_round_trip_float64(self, tmp_path):
        ds = LabeledDataset(np.random.default_rng(0).normal(size=(4, 3)), "train", np.array([0, 1, 1, 0]), 2)
        save_dataset(ds, tmp_path / "d.csv")
        np.testing.assert_array_equal(load_dataset(tmp_path / "d.csv", dtype=np.float64).x, ds.x)

    def test_unlabeled_schema(self, tmp_path):
        (tmp_path / "u.csv").write_text("f0,f1\n1,2\n3,4\n")
        ds = load_dataset(tmp_path / "u.csv")
        assert type(ds) is UnlabeledDataset and ds.x.shape == (2, 2)

    @pytest.mark.parametrize("text, where", [
        ("label,f0\n0,nan\n", ":2"),
        ("label,f0\n0,1\n1,inf\n", ":3"),
        ("label,f0\n0,abc\n", ":2"),
        ("label,x0\n0,1\n", ":1"),
        ("label,f0\n0,1\n5,1\n", ":3"),
        ("label,f0,f1\n0,1\n", ":2"),
        ("label,f0\n0.5,1\n", ":2"),
    ])
    def test_errors_carry_line(self, tmp_path, text, where):
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(DatasetFormatError, match=f"bad.csv{where}"):
            load_dataset(tmp_path / "bad.csv", num_classes=3)

    def test_empty(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(DatasetFormatError, match="empty"):
            load_dataset(tmp_path / "e.csv")
