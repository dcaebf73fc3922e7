import numpy as np
import pytest

from compnet.datasets import (
    LabeledDataset,
    generate_shape,
    load_directory,
    make_synthetic_dataset,
    resample_cloud,
    sample_surface,
    split,
)
from compnet.geometry import PointCloud, save_xyz


class TestGenerateShape:
    def test_sphere_points_on_unit_sphere_after_normalization(self):
        cloud = generate_shape("sphere", 512, jitter=0.0, seed=0)
        radii = np.linalg.norm(cloud.points, axis=1)
        np.testing.assert_allclose(radii, 1.0, atol=1e-6)

    def test_cube_faces_pre_normalization(self):
        rng = np.random.default_rng(1)
        pts = sample_surface("cube", 256, rng)
        on_face = np.isclose(np.abs(pts), 1.0, atol=1e-9).any(axis=1)
        assert on_face.all()

    def test_seeded_reproducibility(self):
        a = generate_shape("torus", 128, jitter=0.02, seed=42)
        b = generate_shape("torus", 128, jitter=0.02, seed=42)
        np.testing.assert_array_equal(a.points, b.points)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown shape kind"):
            generate_shape("pyramid", 64)

    def test_minimum_points(self):
        with pytest.raises(ValueError, match=">= 8"):
            generate_shape("sphere", 4)

    def test_features_are_constant_one(self):
        cloud = generate_shape("cone", 64, seed=2)
        np.testing.assert_array_equal(cloud.features, np.ones((64, 1)))

    def test_cylinder_surface_membership(self):
        rng = np.random.default_rng(3)
        pts = sample_surface("cylinder", 512, rng)
        r = np.hypot(pts[:, 0], pts[:, 1])
        on_side = np.isclose(r, 0.5, atol=1e-9)
        on_cap = np.isclose(np.abs(pts[:, 2]), 1.0, atol=1e-9) & (r <= 0.5 + 1e-9)
        assert (on_side | on_cap).all()

    def test_torus_surface_membership(self):
        rng = np.random.default_rng(4)
        pts = sample_surface("torus", 512, rng)
        ring = np.hypot(pts[:, 0], pts[:, 1])
        tube = np.hypot(ring - 0.75, pts[:, 2])
        np.testing.assert_allclose(tube, 0.25, atol=1e-9)

    def test_all_kinds_generate(self):
        for kind in ("sphere", "cube", "cylinder", "cone", "torus"):
            cloud = generate_shape(kind, 64, seed=5)
            assert cloud.num_points == 64


class TestSyntheticDataset:
    def test_composition(self):
        ds = make_synthetic_dataset(("sphere", "cube"), 5, n_points=32, seed=0)
        assert len(ds) == 10
        assert ds.num_classes == 2
        labels = [cid for _, cid, _ in ds.instances]
        assert labels.count(0) == 5 and labels.count(1) == 5

    def test_instance_ids_unique(self):
        ds = make_synthetic_dataset(("sphere",), 4, n_points=32, seed=0)
        ids = [iid for _, _, iid in ds.instances]
        assert len(set(ids)) == 4

    def test_1024_point_default(self):
        ds = make_synthetic_dataset(("cube",), 1, seed=0)
        assert ds.instances[0][0].num_points == 1024


class TestLoadDirectory:
    def _write_dataset(self, root, counts):
        rng = np.random.default_rng(0)
        for cls, (n_files, n_points) in counts.items():
            d = root / cls
            d.mkdir(parents=True)
            for i in range(n_files):
                cloud = PointCloud(rng.normal(size=(n_points, 3)))
                save_xyz(cloud, d / f"item{i}.xyz")

    def test_counts_and_class_ids(self, tmp_path):
        self._write_dataset(tmp_path, {"box": (3, 40), "ball": (3, 40)})
        ds = load_directory(tmp_path, points_per_cloud=32, seed=0)
        assert len(ds) == 6
        assert ds.class_names == ["ball", "box"]  # sorted directory order
        assert ds.num_classes == 2

    def test_large_cloud_downsampled(self, tmp_path):
        self._write_dataset(tmp_path, {"a": (1, 2000)})
        ds = load_directory(tmp_path, points_per_cloud=1024, seed=0)
        cloud = ds.instances[0][0]
        assert cloud.num_points == 1024
        # without replacement: all rows distinct
        assert len({tuple(p) for p in cloud.points}) == 1024

    def test_small_cloud_upsampled_with_duplicates(self, tmp_path):
        self._write_dataset(tmp_path, {"a": (1, 500)})
        ds = load_directory(tmp_path, points_per_cloud=1024, seed=0)
        cloud = ds.instances[0][0]
        assert cloud.num_points == 1024
        assert len({tuple(p) for p in cloud.points}) <= 500

    def test_unreadable_file_named(self, tmp_path):
        d = tmp_path / "cls"
        d.mkdir()
        (d / "bad.xyz").write_text("not a number at all\n")
        with pytest.raises(ValueError, match="bad.xyz"):
            load_directory(tmp_path)

    def test_empty_root(self, tmp_path):
        with pytest.raises(ValueError, match="no class directories"):
            load_directory(tmp_path)

    def test_deterministic_resampling(self, tmp_path):
        self._write_dataset(tmp_path, {"a": (2, 300)})
        a = load_directory(tmp_path, points_per_cloud=64, seed=5)
        b = load_directory(tmp_path, points_per_cloud=64, seed=5)
        np.testing.assert_array_equal(a.instances[0][0].points,
                                      b.instances[0][0].points)


class TestResample:
    def test_exact_when_equal(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(16, 3)))
        out = resample_cloud(cloud, 16, np.random.default_rng(1))
        assert out.num_points == 16
        assert {tuple(p) for p in out.points} == {tuple(p) for p in cloud.points}


class TestSplit:
    def test_stratified_counts(self):
        ds = make_synthetic_dataset(("sphere", "cube", "cone"), 10,
                                    n_points=32, seed=0)
        train, test = split(ds, 0.7, seed=1)
        for cid in range(3):
            n_train = sum(1 for _, c, _ in train.instances if c == cid)
            assert abs(n_train - 7) <= 1
        assert len(train) + len(test) == 30

    def test_disjoint_ids(self):
        ds = make_synthetic_dataset(("sphere", "cube"), 8, n_points=32, seed=0)
        train, test = split(ds, 0.5, seed=2)
        train_ids = {iid for _, _, iid in train.instances}
        test_ids = {iid for _, _, iid in test.instances}
        assert not train_ids & test_ids

    def test_seeded_determinism(self):
        ds = make_synthetic_dataset(("sphere", "cube"), 8, n_points=32, seed=0)
        a_train, _ = split(ds, 0.5, seed=3)
        b_train, _ = split(ds, 0.5, seed=3)
        assert [i for _, _, i in a_train.instances] == \
               [i for _, _, i in b_train.instances]

    def test_bad_fraction(self):
        ds = make_synthetic_dataset(("sphere",), 4, n_points=32, seed=0)
        with pytest.raises(ValueError, match="train_fraction"):
            split(ds, 1.5, seed=0)


class TestLabeledDataset:
    def test_duplicate_ids_rejected(self):
        cloud = generate_shape("cube", 32, seed=0)
        with pytest.raises(ValueError, match="unique"):
            LabeledDataset([(cloud, 0, "x"), (cloud, 0, "x")], ["a"])

    def test_class_id_range(self):
        cloud = generate_shape("cube", 32, seed=0)
        with pytest.raises(ValueError, match="out of range"):
            LabeledDataset([(cloud, 1, "x")], ["a"])
