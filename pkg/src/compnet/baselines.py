"""Shallow anomaly-detection baseline: the hand-crafted orthographic
occupancy descriptor plus an Isolation Forest over descriptor vectors."""

from dataclasses import dataclass

import numpy as np

from . import seeds

DEFAULT_BINS = 5
DEFAULT_TREES = 100
DEFAULT_SUBSAMPLE = 256

# plane order and the row/column roles inside each grid are fixed
# conventions; the forest is indifferent to feature order given retraining
_PLANES = ((0, 1), (0, 2), (1, 2))


@dataclass
class GoodDescriptor:
    """Occupancy histogram over three orthographic projections in the
    cloud's PCA frame; vector length is 3 * bins^2."""

    bins: int
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (3 * self.bins * self.bins,):
            raise ValueError("descriptor length must be 3 * bins^2")


def _pca_frame(points):
    """Eigenvectors of the centered covariance by descending eigenvalue,
    signs fixed so each axis's third moment is non-negative (ties keep +)."""
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    if evals[0] <= 0.0 or evals[1] <= 1e-12 * evals[0]:
        raise ValueError("degenerate PCA: fewer than 3 non-collinear points")
    coords = centered @ evecs
    thirds = (coords ** 3).sum(axis=0)
    flip = np.where(thirds < 0.0, -1.0, 1.0)
    return coords * flip


def _plane_histogram(u, v, bins):
    lo_u, hi_u = u.min(), u.max() + 1e-9
    lo_v, hi_v = v.min(), v.max() + 1e-9
    iu = np.minimum((bins * (u - lo_u) / (hi_u - lo_u)).astype(int), bins - 1)
    iv = np.minimum((bins * (v - lo_v) / (hi_v - lo_v)).astype(int), bins - 1)
    counts = np.bincount(iu * bins + iv, minlength=bins * bins)
    return counts.astype(float)


def good_descriptor(cloud, bins=DEFAULT_BINS):
    """Project the cloud onto the three coordinate planes of its PCA frame
    and count points per cell of a bins x bins grid spanning each plane's
    bounding box; concatenate the grids row-major in plane order."""
    if cloud.num_points < 3:
        raise ValueError("degenerate PCA: need at least 3 points")
    coords = _pca_frame(cloud.points)
    blocks = [_plane_histogram(coords[:, a], coords[:, b], bins)
              for a, b in _PLANES]
    return GoodDescriptor(bins, np.concatenate(blocks))


# -- isolation forest ---------------------------------------------------------


class _Leaf:
    __slots__ = ("size",)

    def __init__(self, size):
        self.size = size


class _Split:
    __slots__ = ("feature", "threshold", "left", "right")

    def __init__(self, feature, threshold, left, right):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right


def average_path_length(m):
    """c(m) = 2 H(m-1) - 2 (m-1)/m with the exact harmonic number; the
    expected path length of an unsuccessful BST search, used both as the
    leaf-size correction and as the score normalizer."""
    if m <= 1:
        return 0.0
    if m == 2:
        return 1.0
    harmonic = np.sum(1.0 / np.arange(1, m))
    return 2.0 * harmonic - 2.0 * (m - 1) / m


class IsolationForest:
    def __init__(self, trees, subsample_size, dim):
        self.trees = trees
        self.subsample_size = subsample_size
        self.dim = dim
        self._normalizer = average_path_length(subsample_size)


def _grow(x, depth, limit, rng):
    n = x.shape[0]
    if n <= 1 or depth >= limit:
        return _Leaf(n)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    candidates = np.nonzero(hi > lo)[0]
    if candidates.size == 0:
        return _Leaf(n)
    feature = int(candidates[rng.integers(candidates.size)])
    threshold = rng.uniform(lo[feature], hi[feature])
    mask = x[:, feature] < threshold
    return _Split(feature, threshold,
                  _grow(x[mask], depth + 1, limit, rng),
                  _grow(x[~mask], depth + 1, limit, rng))


def ifor_fit(vectors, trees=DEFAULT_TREES, subsample=DEFAULT_SUBSAMPLE, seed=0):
    """Grow `trees` isolation trees, each on a random subsample, with
    uniform random split features (among those with spread) and uniform
    thresholds, up to height ceil(log2 subsample)."""
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 vectors")
    psi = min(subsample, x.shape[0])
    limit = int(np.ceil(np.log2(psi)))
    forest = IsolationForest([], psi, x.shape[1])
    for t in range(trees):
        rng = seeds.substream(seed, seeds.IFOR, t)
        idx = rng.choice(x.shape[0], size=psi, replace=False)
        forest.trees.append(_grow(x[idx], 0, limit, rng))
    return forest


def _path_length(node, vector):
    depth = 0
    while isinstance(node, _Split):
        node = node.left if vector[node.feature] < node.threshold else node.right
        depth += 1
    return depth + average_path_length(node.size)


def ifor_score(forest, vector):
    """Anomaly score 2^(-E[h(x)] / c(psi)) in (0, 1); higher = more
    anomalous; E[h] = c(psi) gives exactly 0.5."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (forest.dim,):
        raise ValueError(
            f"dimension mismatch: forest expects {forest.dim}, "
            f"got {vector.shape}")
    mean_path = np.mean([_path_length(tree, vector) for tree in forest.trees])
    return float(2.0 ** (-mean_path / forest._normalizer))
