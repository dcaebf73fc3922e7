import numpy as np
import pytest

from compnet.geometry import (
    PointCloud,
    knn_windows,
    load_xyz,
    neighbor_table,
    normalize,
    sample_output_points,
    save_xyz,
)


def brute_force_knn(points, outputs, w):
    """Exhaustive O(N*Q) oracle: full distance sort, ties by lower index."""
    idx = np.empty((len(outputs), w), dtype=np.intp)
    for q, y in enumerate(outputs):
        d = np.einsum("nd,nd->n", points - y, points - y)
        order = sorted(range(len(points)), key=lambda i: (d[i], i))
        row = [order[i % len(points)] for i in range(w)]
        idx[q] = row
    return idx


def simulate_spread_draws(points, count, seed, attenuation):
    """Straightforward reimplementation of the attenuated weighted draw."""
    rng = np.random.default_rng(seed)
    uniforms = rng.random(count)
    n = len(points)
    d2 = np.einsum("qnd,qnd->qn", points[:, None] - points[None, :],
                   points[:, None] - points[None, :])
    np.fill_diagonal(d2, np.inf)
    k = min(8, n - 1)
    nbrs = [sorted(range(n), key=lambda j: (d2[i, j], j))[:k] for i in range(n)]
    weights = [1.0] * n
    chosen = []
    for t in range(count):
        total = sum(weights)
        if total <= 0.0:
            weights = [1.0] * n
            total = float(n)
        r = uniforms[t] * total
        acc = 0.0
        j = n - 1
        for i, wgt in enumerate(weights):
            acc += wgt
            if acc > r:
                j = i
                break
        chosen.append(j)
        weights[j] *= attenuation
        for nb in nbrs[j]:
            weights[nb] *= attenuation
    return chosen


class TestKnnWindows:
    def test_nearest_distance_ordering(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0], [5, 0, 0]])
        ws = knn_windows(cloud, [[0.1, 0, 0]], 2)
        assert ws.neighbor_indices.tolist() == [[0, 1]]

    def test_cyclic_repetition(self):
        cloud = PointCloud([[2.0, 3.0, 4.0]])
        ws = knn_windows(cloud, [[0, 0, 0]], 3)
        assert ws.neighbor_indices.tolist() == [[0, 0, 0]]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        cloud = PointCloud(rng.normal(size=(64, 3)))
        outputs = rng.normal(size=(10, 3))
        ws = knn_windows(cloud, outputs, 8)
        expected = brute_force_knn(cloud.points, outputs, 8)
        np.testing.assert_array_equal(ws.neighbor_indices, expected)

    def test_matches_oracle_over_many_sizes(self):
        rng = np.random.default_rng(11)
        for trial in range(30):
            n = int(rng.integers(2, 257))
            q = int(rng.integers(1, 65))
            w = int(rng.integers(1, min(33, n + 5)))
            cloud = PointCloud(rng.normal(size=(n, 3)))
            outputs = cloud.points[rng.integers(0, n, size=q)]
            ws = knn_windows(cloud, outputs, w)
            expected = brute_force_knn(cloud.points, outputs, w)
            np.testing.assert_array_equal(ws.neighbor_indices, expected, err_msg=f"trial {trial}")

    def test_tie_break_lower_index(self):
        # four points at the same distance from the output
        cloud = PointCloud([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]])
        ws = knn_windows(cloud, [[0, 0, 0]], 2)
        assert ws.neighbor_indices.tolist() == [[0, 1]]

    def test_tie_break_on_grid(self):
        # integer grid gives many exactly-equal distances
        grid = np.stack(np.meshgrid(range(4), range(4), range(4), indexing="ij"),
                        axis=-1).reshape(-1, 3).astype(float)
        cloud = PointCloud(grid)
        outputs = grid[[0, 21, 43]]
        ws = knn_windows(cloud, outputs, 9)
        expected = brute_force_knn(cloud.points, outputs, 9)
        np.testing.assert_array_equal(ws.neighbor_indices, expected)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(40, 3))
        outputs = rng.normal(size=(6, 3))
        perm = rng.permutation(40)
        ws = knn_windows(PointCloud(pts), outputs, 5)
        ws_p = knn_windows(PointCloud(pts[perm]), outputs, 5)
        for q in range(6):
            mapped = sorted(perm[ws_p.neighbor_indices[q]])
            assert mapped == sorted(ws.neighbor_indices[q].tolist())

    def test_exclude_center(self):
        cloud = PointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
        ws = knn_windows(cloud, [[0, 0, 0]], 2, exclude_center=True)
        assert ws.neighbor_indices.tolist() == [[1, 2]]

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError, match="empty point cloud"):
            PointCloud(np.zeros((0, 3)))

    def test_bad_window_size(self):
        cloud = PointCloud([[0, 0, 0]])
        with pytest.raises(ValueError):
            knn_windows(cloud, [[0, 0, 0]], 0)


class TestSampleOutputPoints:
    def test_single_point_cloud(self):
        cloud = PointCloud([[3.0, 2.0, 1.0]])
        out = sample_output_points(cloud, 5, 0)
        assert out.shape == (5, 3)
        np.testing.assert_array_equal(out, np.tile([[3.0, 2.0, 1.0]], (5, 1)))

    def test_matches_straightforward_simulation(self):
        rng = np.random.default_rng(3)
        for seed in range(5):
            pts = rng.normal(size=(16, 3))
            cloud = PointCloud(pts)
            got = sample_output_points(cloud, 16, seed, attenuation=0.0)
            expected = simulate_spread_draws(pts, 16, seed, 0.0)
            np.testing.assert_array_equal(got, pts[expected])

    def test_zero_attenuation_spreads_draws(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(16, 3))
        cloud = PointCloud(pts)
        out = sample_output_points(cloud, 16, 123, attenuation=0.0)
        distinct = {tuple(row) for row in out}
        assert len(distinct) >= 16 / 9

    def test_deterministic_per_seed(self):
        cloud = PointCloud(np.random.default_rng(1).normal(size=(50, 3)))
        a = sample_output_points(cloud, 20, 77)
        b = sample_output_points(cloud, 20, 77)
        np.testing.assert_array_equal(a, b)

    def test_default_attenuation_simulation(self):
        rng = np.random.default_rng(17)
        pts = rng.normal(size=(30, 3))
        got = sample_output_points(PointCloud(pts), 25, 4)
        expected = simulate_spread_draws(pts, 25, 4, 0.25)
        np.testing.assert_array_equal(got, pts[expected])


class TestNormalize:
    def test_two_point_example(self):
        cloud = PointCloud([[1, 1, 1], [3, 1, 1]])
        out = normalize(cloud)
        np.testing.assert_allclose(out.points, [[-1, 0, 0], [1, 0, 0]], atol=1e-15)

    def test_single_point(self):
        out = normalize(PointCloud([[7.0, 7.0, 7.0]]))
        np.testing.assert_array_equal(out.points, [[0.0, 0.0, 0.0]])

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        cloud = normalize(PointCloud(rng.normal(size=(30, 3))))
        again = normalize(cloud)
        np.testing.assert_allclose(again.points, cloud.points, atol=1e-12)

    def test_features_untouched(self):
        feats = np.arange(6.0).reshape(3, 2)
        out = normalize(PointCloud(np.eye(3), feats))
        np.testing.assert_array_equal(out.features, feats)


class TestTextFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        cloud = PointCloud(rng.normal(size=(8, 3)), rng.normal(size=(8, 2)))
        path = tmp_path / "cloud.xyz"
        save_xyz(cloud, path)
        back = load_xyz(path)
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back.features, cloud.features)

    def test_comments_and_feature_padding(self, tmp_path):
        path = tmp_path / "c.xyz"
        path.write_text("# header\n0 0 0\n1 2 3  # trailing comment\n")
        cloud = load_xyz(path)
        assert cloud.num_points == 2
        np.testing.assert_array_equal(cloud.features, [[1.0], [1.0]])

    def test_inconsistent_columns(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("0 0 0 1\n1 1 1\n")
        with pytest.raises(ValueError, match="bad.xyz:2"):
            load_xyz(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.xyz"
        path.write_text("# nothing\n")
        with pytest.raises(ValueError, match="no points"):
            load_xyz(path)


def test_neighbor_table_excludes_self():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
    table = neighbor_table(pts, k=2)
    assert table[0].tolist() == [1, 2]
    assert table[3].tolist() == [2, 1]
