"""Self-supervised anomaly detection via rotation classification, plus the
Deep SVDD detector and the shared scoring pipeline.

The surrogate task rotates each normal training cloud by a fixed set of
angles about a horizontal axis and trains a classifier to recognize which
rotation was applied. At test time the normality score of a cloud is the
average posterior probability of the correct rotation over the whole set;
anomaly scores negate it so that, across every detector, higher means more
anomalous.
"""

from dataclasses import dataclass

import numpy as np

from . import seeds
from .baselines import good_descriptor, ifor_fit, ifor_score
from .geometry import PointCloud
from .network import build_classification_net, build_dsvdd_net
from .training import TrainConfig, softmax, train, untrained_center

# rotation angles used for the surrogate task; the identity comes first
DEFAULT_ANGLES = (0.0, 45.0, 90.0, 135.0, 210.0, 240.0, 300.0, 330.0)
HORIZONTAL_AXIS = (1.0, 0.0, 0.0)
# by convention the z coordinate is vertical, so a horizontal axis has none
_VERTICAL = 2


@dataclass
class TransformationSet:
    """Ordered rotation angles (degrees) about one fixed horizontal axis."""

    angles: tuple = DEFAULT_ANGLES
    axis: tuple = HORIZONTAL_AXIS

    def __post_init__(self):
        self.angles = tuple(float(a) for a in self.angles)
        self.axis = np.asarray(self.axis, dtype=float)
        if len(self.angles) < 2:
            raise ValueError("need at least two transformations")
        if self.angles[0] != 0.0:
            raise ValueError("the first transformation must be the identity")
        if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
            raise ValueError("axis must have unit length")
        if abs(self.axis[_VERTICAL]) > 1e-12:
            raise ValueError("axis must be horizontal (no vertical component)")

    def __len__(self):
        return len(self.angles)

    def apply(self, cloud, index):
        return rotate(cloud, self.angles[index], self.axis)


def rotation_matrix(angle_deg, axis):
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise ValueError("rotation axis must be nonzero")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError("rotation axis must have unit length")
    theta = np.deg2rad(angle_deg)
    k = axis
    kx = np.array([[0.0, -k[2], k[1]],
                   [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def rotate(cloud, angle_deg, axis=HORIZONTAL_AXIS):
    """Right-handed rotation about an axis through the origin; features are
    untouched. Clouds are assumed normalized so the origin is the centroid."""
    r = rotation_matrix(angle_deg, axis)
    return PointCloud(cloud.points @ r.T, cloud.features.copy())


def build_surrogate_dataset(normals, transformation_set):
    """One item per (cloud, transformation): T_n(P) labeled n."""
    if not normals:
        raise ValueError("empty training set")
    items = []
    for cloud in normals:
        for n in range(len(transformation_set)):
            items.append((transformation_set.apply(cloud, n), n))
    return items


@dataclass
class ScoredDataset:
    """Per-instance anomaly scores (higher = more anomalous) with labels
    (1 = anomalous, 0 = normal)."""

    scores: list
    labels: list

    def __post_init__(self):
        self.scores = [float(s) for s in self.scores]
        self.labels = [int(l) for l in self.labels]
        if len(self.scores) != len(self.labels):
            raise ValueError("scores and labels must have equal length")
        if not all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def normality_score(net, cloud, transformation_set, sample_seed=0):
    """Average posterior probability of the correct transformation:
    S(P) = (1/N) sum_n softmax(net(T_n(P)))[n], in [0, 1].

    All transformed copies share one evaluation sampling stream, so the
    score is reproducible per (cloud, sample_seed)."""
    n_transforms = len(transformation_set)
    if net.spec.num_outputs != n_transforms:
        raise ValueError(
            f"network emits {net.spec.num_outputs} classes but the "
            f"transformation set has {n_transforms}")
    rotated = [transformation_set.apply(cloud, n) for n in range(n_transforms)]
    points = np.stack([r.points for r in rotated])
    feats = np.stack([r.features for r in rotated])
    logits = net.forward(points, feats, train=False,
                         sample_key=(seeds.EVAL, sample_seed),
                         shared_sampling=True)
    probs = softmax(logits)
    return float(np.mean(probs[np.arange(n_transforms), np.arange(n_transforms)]))


def dsvdd_score(net, center, cloud, sample_seed=0):
    """Squared distance of the embedding from the center; higher = more
    anomalous."""
    center = np.asarray(center, dtype=float)
    if net.spec.num_outputs != center.shape[0]:
        raise ValueError(
            f"network embeds into {net.spec.num_outputs} dimensions but the "
            f"center has {center.shape[0]}")
    emb = net.forward_single(cloud, train=False,
                             sample_key=(seeds.EVAL, sample_seed))
    diff = emb - center
    return float(diff @ diff)


@dataclass
class DetectorConfig:
    """Configuration for anomaly.detect; architecture defaults follow the
    best reported configuration of each detector."""

    kind: str = "selfsup"                # selfsup | dsvdd | good_ifor
    layer_kind: str = "aggr_composite"
    j0: int = None
    num_centers: int = None
    spatial_dim: int = None
    sigma: float = 0.3
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "f64"
    angles: tuple = DEFAULT_ANGLES
    axis: tuple = HORIZONTAL_AXIS
    latent_dim: int = 32
    noise_sigma: float = 0.01
    bins: int = 5
    trees: int = 100
    subsample: int = 256
    verbose: bool = False

    _DEFAULTS = {"selfsup": (32, 256, 32), "dsvdd": (8, 128, 96)}

    def __post_init__(self):
        if self.kind not in ("selfsup", "dsvdd", "good_ifor"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        default = self._DEFAULTS.get(self.kind, (32, 256, 32))
        if self.j0 is None:
            self.j0 = default[0]
        if self.num_centers is None:
            self.num_centers = default[1]
        if self.spatial_dim is None:
            self.spatial_dim = default[2]

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def _train_config(config, loss_kind, **extra):
    return TrainConfig(epochs=config.epochs, batch_size=config.batch_size,
                       lr=config.lr, seed=config.seed, loss_kind=loss_kind,
                       noise_sigma=config.noise_sigma,
                       verbose=config.verbose, **extra)


def fit_selfsup(train_normals, config):
    """Train the rotation classifier on the surrogate dataset."""
    ts = TransformationSet(config.angles, config.axis)
    items = build_surrogate_dataset(train_normals, ts)
    net = build_classification_net(
        config.layer_kind, config.j0, config.num_centers, config.spatial_dim,
        num_classes=len(ts), sigma=config.sigma, init_seed=config.seed,
        dtype=config.np_dtype)
    net.train_seed = config.seed
    net, log = train(net, items, _train_config(config, "cross_entropy"))
    return net, ts, log


def fit_dsvdd(train_normals, config):
    """Train the Deep SVDD network toward its fixed center."""
    net = build_dsvdd_net(
        config.layer_kind, config.j0, config.num_centers, config.spatial_dim,
        latent_dim=config.latent_dim, sigma=config.sigma,
        init_seed=config.seed, dtype=config.np_dtype)
    net.train_seed = config.seed
    center = untrained_center(net, train_normals)
    items = [(cloud, 0) for cloud in train_normals]
    net, log = train(net, items,
                     _train_config(config, "dsvdd", dsvdd_center=center))
    return net, center, log


def detect(train_normals, test_set, config):
    """Train the configured detector on normal clouds and score the test
    set. test_set holds (cloud, label) pairs with label 1 = anomalous.
    Returns a ScoredDataset where higher scores are more anomalous."""
    if not train_normals:
        raise ValueError("empty training set")
    labels = [label for _, label in test_set]
    if config.kind == "selfsup":
        net, ts, _ = fit_selfsup(train_normals, config)
        scores = [-normality_score(net, cloud, ts, sample_seed=i)
                  for i, (cloud, _) in enumerate(test_set)]
    elif config.kind == "dsvdd":
        net, center, _ = fit_dsvdd(train_normals, config)
        scores = [dsvdd_score(net, center, cloud, sample_seed=i)
                  for i, (cloud, _) in enumerate(test_set)]
    else:
        vectors = np.stack([good_descriptor(c, config.bins).vector
                            for c in train_normals])
        forest = ifor_fit(vectors, config.trees, config.subsample, config.seed)
        scores = [ifor_score(forest, good_descriptor(cloud, config.bins).vector)
                  for cloud, _ in test_set]
    return ScoredDataset(scores, labels)


def write_scores_csv(scored, path, instance_ids=None):
    ids = instance_ids or [str(i) for i in range(len(scored.scores))]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("instance_id,score,label\n")
        for iid, score, label in zip(ids, scored.scores, scored.labels):
            fh.write(f"{iid},{score!r},{label}\n")
