"""Point-cloud representation and the spatial plumbing used by every layer:
nearest-neighbor window construction, output-point sampling, normalization,
and the text file format.
"""

from dataclasses import dataclass, field

import numpy as np

# Attenuation applied to the selection weight of a drawn output point and
# its 8 nearest neighbors, so later draws spread over the cloud.
DEFAULT_ATTENUATION = 0.25
_SAMPLER_NEIGHBORS = 8


@dataclass
class PointCloud:
    """N points in 3D plus an N x I feature matrix."""

    points: np.ndarray
    features: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if self.points.shape[0] < 1:
            raise ValueError("empty point cloud")
        if self.features is None:
            self.features = np.ones((self.points.shape[0], 1))
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.points.shape[0]:
            raise ValueError(
                f"features must be (N, I) with N={self.points.shape[0]}, "
                f"got {self.features.shape}"
            )
        if not (np.isfinite(self.points).all() and np.isfinite(self.features).all()):
            raise ValueError("point cloud contains non-finite values")

    @property
    def num_points(self):
        return self.points.shape[0]

    @property
    def feature_width(self):
        return self.features.shape[1]


@dataclass
class WindowSet:
    """For each output point, its coordinates and the indices of its
    window_size nearest input points (nearest first)."""

    outputs: np.ndarray
    neighbor_indices: np.ndarray
    window_size: int = field(default=0)

    def __post_init__(self):
        self.outputs = np.asarray(self.outputs, dtype=float)
        self.neighbor_indices = np.asarray(self.neighbor_indices, dtype=np.intp)
        if self.outputs.ndim != 2 or self.outputs.shape[1] != 3:
            raise ValueError(f"outputs must be (Q, 3), got {self.outputs.shape}")
        if self.outputs.shape[0] < 1:
            raise ValueError("window set needs at least one output point")
        q, w = self.neighbor_indices.shape
        if q != self.outputs.shape[0]:
            raise ValueError("outputs / neighbor_indices row mismatch")
        if self.window_size == 0:
            self.window_size = w
        if self.window_size != w:
            raise ValueError("window_size does not match neighbor_indices width")
        if (self.neighbor_indices < 0).any():
            raise ValueError("negative neighbor index")

    @property
    def num_outputs(self):
        return self.outputs.shape[0]


def squared_distances(a, b):
    """Pairwise squared Euclidean distances, (Qa, 3) x (Qb, 3) -> (Qa, Qb)."""
    a2 = np.einsum("nd,nd->n", a, a)
    b2 = np.einsum("nd,nd->n", b, b)
    d2 = a @ (-2.0 * b.T)
    d2 += a2[:, None]
    d2 += b2
    return np.maximum(d2, 0.0, out=d2)


def _full_nearest(d2):
    """Full (distance, index) sort of every row."""
    cols = np.broadcast_to(np.arange(d2.shape[1]), d2.shape)
    return np.lexsort((cols, d2), axis=1)


def nearest_rows(d2, count):
    """Row-wise indices of the `count` smallest entries of d2, ordered by
    (distance, index). Exact under ties: lower index wins."""
    q, n = d2.shape
    if count >= n:
        return _full_nearest(d2)

    # partition one past the cut: column `count` then holds the next-worst
    # distance, so boundary ties are detectable in O(Q)
    part = np.argpartition(d2, count, axis=1)[:, :count + 1]
    dpart = np.take_along_axis(d2, part, axis=1)
    # candidates arranged by ascending index make the stable distance sort
    # break ties toward the lower index
    inner = np.argsort(part[:, :count], axis=1)
    cand = np.take_along_axis(part[:, :count], inner, axis=1)
    dcand = np.take_along_axis(dpart[:, :count], inner, axis=1)
    order = np.argsort(dcand, axis=1, kind="stable")
    idx = np.take_along_axis(cand, order, axis=1)
    dsorted = np.take_along_axis(dcand, order, axis=1)
    boundary = dsorted[:, -1]

    # a group of equal distances split across the cut must resolve to the
    # lowest indices overall; replace the tied suffix of the selection with
    # the first ties found in index order
    bad = np.nonzero(dpart[:, count] == boundary)[0]
    if bad.size:
        bnd = boundary[bad, None]
        tie_len = (dsorted[bad] == bnd).sum(axis=1)
        # nonzero is row-major, so each row's tie columns arrive in
        # ascending index order; keep the first tie_len of them and write
        # them into the tied suffix slots of the selection
        rows, cols = np.nonzero(d2[bad] == bnd)
        starts = np.searchsorted(rows, np.arange(bad.size))
        rank = np.arange(rows.size) - starts[rows]
        keep = rank < tie_len[rows]
        rows, cols, rank = rows[keep], cols[keep], rank[keep]
        slot = count - tie_len[rows] + rank
        idx[bad[rows], slot] = cols
    return idx


def knn_windows(cloud, outputs, window_size, exclude_center=False):
    """Window of the `window_size` input points nearest to each output.

    Ties break toward the lower input index. If the cloud has fewer than
    window_size points, indices repeat cyclically in nearest-first order.
    With exclude_center=True, input points exactly at an output location
    are not eligible for that output's window.
    """
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim != 2 or outputs.shape[1] != 3:
        raise ValueError(f"outputs must be (Q, 3), got {outputs.shape}")
    if not np.isfinite(outputs).all():
        raise ValueError("outputs contain non-finite values")
    n = cloud.num_points
    if n == 0:
        raise ValueError("empty point cloud")

    d2 = squared_distances(outputs, cloud.points)
    if exclude_center:
        coincident = (outputs[:, None, :] == cloud.points[None, :, :]).all(axis=2)
        d2 = np.where(coincident, np.inf, d2)
    if n >= window_size:
        idx = nearest_rows(d2, window_size)
    else:
        order = nearest_rows(d2, n)
        reps = -(-window_size // n)
        idx = np.tile(order, (1, reps))[:, :window_size]
    return WindowSet(outputs.copy(), idx, window_size)


def neighbor_table(points, k=_SAMPLER_NEIGHBORS):
    """Indices of each point's k nearest other points (self excluded)."""
    n = points.shape[0]
    k = min(k, n - 1)
    if k <= 0:
        return np.zeros((n, 0), dtype=np.intp)
    d2 = squared_distances(points, points)
    np.fill_diagonal(d2, np.inf)
    return nearest_rows(d2, k)


def sample_output_points(cloud, count, rng_seed, attenuation=DEFAULT_ATTENUATION):
    """Draw `count` output points from the cloud, with replacement.

    After each draw the selection weight of the drawn point and of its 8
    nearest neighbors is multiplied by `attenuation`, lowering the chance
    that later output points land in the same region. If every weight
    reaches zero the weights reset to uniform. Deterministic per seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n = cloud.num_points
    if n == 0:
        raise ValueError("empty point cloud")
    if n == 1:
        return np.repeat(cloud.points, count, axis=0)

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else \
        np.random.default_rng(rng_seed)
    uniforms = rng.random(count)
    nbrs = neighbor_table(cloud.points)
    chosen = weighted_spread_draws(uniforms[None, :], nbrs[None, :, :], attenuation)[0]
    return cloud.points[chosen].copy()


def weighted_spread_draws(uniforms, nbrs, attenuation):
    """Batched core of sample_output_points.

    uniforms: (B, count) pre-drawn uniforms; nbrs: (B, N, k) neighbor
    tables. Returns (B, count) drawn indices. Kept separate so the network
    can sample a whole batch per loop step with identical per-item results.
    """
    b, count = uniforms.shape
    n = nbrs.shape[1]
    weights = np.ones((b, n))
    rows = np.arange(b)
    chosen = np.empty((b, count), dtype=np.intp)
    for t in range(count):
        totals = weights.sum(axis=1)
        dead = totals <= 0.0
        if dead.any():
            weights[dead] = 1.0
            totals[dead] = float(n)
        cum = np.cumsum(weights, axis=1)
        r = uniforms[:, t] * totals
        j = np.minimum((cum <= r[:, None]).sum(axis=1), n - 1)
        chosen[:, t] = j
        weights[rows, j] *= attenuation
        if nbrs.shape[2]:
            weights[rows[:, None], nbrs[rows, j]] *= attenuation
    return chosen


def normalize(cloud):
    """Translate the centroid to the origin and scale so the farthest point
    sits at distance 1 (no scaling if all points coincide)."""
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0.0:
        centered = centered / radius
    return PointCloud(centered, cloud.features.copy())


def load_xyz(path):
    """Read the text format: one point per line, `x y z [f1 ... fI]`,
    '#' comment lines ignored. Missing features are padded with 1."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected at least x y z")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ValueError(f"{path}:{lineno}: inconsistent column count")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    data = np.asarray(rows)
    points = data[:, :3]
    features = data[:, 3:] if data.shape[1] > 3 else np.ones((len(rows), 1))
    return PointCloud(points, features)


def save_xyz(cloud, path):
    data = np.hstack([cloud.points, cloud.features])
    with open(path, "w", encoding="utf-8") as fh:
        for row in data:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
