"""Synthetic shape generation for desk-scale experiments, ingestion of
point-cloud directories, and split management."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds
from .geometry import PointCloud, load_xyz, normalize

POINTS_PER_CLOUD = 1024

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus")


@dataclass
class LabeledDataset:
    """Instances are (cloud, class id, instance id) triples; class ids are
    dense in [0, len(class_names))."""

    instances: list
    class_names: list
    split_tag: str = "train"

    def __post_init__(self):
        ids = [iid for _, _, iid in self.instances]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        for _, cid, _ in self.instances:
            if not 0 <= cid < len(self.class_names):
                raise ValueError(f"class id {cid} out of range")

    def __len__(self):
        return len(self.instances)

    def pairs(self):
        return [(cloud, cid) for cloud, cid, _ in self.instances]

    @property
    def num_classes(self):
        return len(self.class_names)


def _unit_sphere(n, rng):
    # antipodal pairs keep the sample centroid at the exact center, so the
    # normalized cloud has every point at distance 1
    half = n // 2
    raw = rng.normal(size=(half + n % 2, 3))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    pts = np.concatenate([raw[:half], -raw[:half], raw[half:]], axis=0)
    return pts


def _cube_surface(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _cylinder_surface(n, rng, radius=0.5, half_height=1.0):
    lateral_area = 2 * np.pi * radius * 2 * half_height
    cap_area = 2 * np.pi * radius ** 2
    p_lateral = lateral_area / (lateral_area + cap_area)
    pts = np.empty((n, 3))
    on_side = rng.random(n) < p_lateral
    theta = rng.uniform(0.0, 2 * np.pi, n)
    k = int(on_side.sum())
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-half_height, half_height, k)
    caps = ~on_side
    r = radius * np.sqrt(rng.random(n - k))
    pts[caps, 0] = r * np.cos(theta[caps])
    pts[caps, 1] = r * np.sin(theta[caps])
    pts[caps, 2] = np.where(rng.random(n - k) < 0.5, half_height, -half_height)
    return pts


def _cone_surface(n, rng, radius=0.5, apex_z=1.0, base_z=-1.0):
    height = apex_z - base_z
    slant = np.hypot(height, radius)
    lateral_area = np.pi * radius * slant
    base_area = np.pi * radius ** 2
    p_lateral = lateral_area / (lateral_area + base_area)
    pts = np.empty((n, 3))
    theta = rng.uniform(0.0, 2 * np.pi, n)
    on_side = rng.random(n) < p_lateral
    k = int(on_side.sum())
    # lateral area density grows linearly with distance from the apex
    t = np.sqrt(rng.random(k))
    r = radius * t
    pts[on_side, 0] = r * np.cos(theta[on_side])
    pts[on_side, 1] = r * np.sin(theta[on_side])
    pts[on_side, 2] = apex_z - height * t
    base = ~on_side
    rb = radius * np.sqrt(rng.random(n - k))
    pts[base, 0] = rb * np.cos(theta[base])
    pts[base, 1] = rb * np.sin(theta[base])
    pts[base, 2] = base_z
    return pts


def _torus_surface(n, rng, major=0.75, minor=0.25):
    u = rng.uniform(0.0, 2 * np.pi, n)
    # area element is proportional to (major + minor cos v): rejection-sample v
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2 * np.pi, 2 * (n - filled))
        accept = rng.random(cand.size) < (major + minor * np.cos(cand)) / (major + minor)
        good = cand[accept][:n - filled]
        v[filled:filled + good.size] = good
        filled += good.size
    ring = major + minor * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)


_SAMPLERS = {
    "sphere": _unit_sphere,
    "cube": _cube_surface,
    "cylinder": _cylinder_surface,
    "cone": _cone_surface,
    "torus": _torus_surface,
}


def sample_surface(kind, n_points, rng):
    """Area-weighted surface sample of the canonical shape, pre-jitter and
    pre-normalization."""
    if kind not in _SAMPLERS:
        raise ValueError(f"unknown shape kind {kind!r}")
    return _SAMPLERS[kind](n_points, rng)


def generate_shape(kind, n_points=POINTS_PER_CLOUD, jitter=0.01, seed=0):
    """Surface sample with Gaussian jitter, constant unit features, then
    centroid/unit-sphere normalization."""
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = sample_surface(kind, n_points, rng)
    if jitter > 0.0:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    return normalize(PointCloud(pts, np.ones((n_points, 1))))


def make_synthetic_dataset(kinds, per_class, n_points=POINTS_PER_CLOUD,
                           jitter=0.01, seed=0, split_tag="train"):
    """per_class instances of each shape kind, labeled by kind order."""
    instances = []
    for cid, kind in enumerate(kinds):
        for i in range(per_class):
            rng = seeds.substream(seed, seeds.DATA, cid, i)
            cloud = generate_shape(kind, n_points, jitter, rng)
            instances.append((cloud, cid, f"{split_tag}_{kind}_{i:04d}"))
    return LabeledDataset(instances, list(kinds), split_tag)


def resample_cloud(cloud, target, rng):
    """Exactly `target` points: uniform without replacement when the cloud
    is large enough, with replacement otherwise."""
    n = cloud.num_points
    idx = rng.choice(n, size=target, replace=n < target)
    return PointCloud(cloud.points[idx], cloud.features[idx])


def load_directory(root, points_per_cloud=POINTS_PER_CLOUD, seed=0,
                   split_tag="train"):
    """Load `root/<class_name>/<instance>.xyz`, class ids by sorted
    directory name, every cloud resampled to exactly points_per_cloud."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class directories")
    instances = []
    names = []
    file_index = 0
    for cid, cdir in enumerate(class_dirs):
        names.append(cdir.name)
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        for path in files:
            try:
                cloud = load_xyz(path)
            except (OSError, ValueError) as exc:
                raise ValueError(f"failed to load {path}: {exc}") from None
            rng = seeds.substream(seed, seeds.DATA, file_index)
            cloud = resample_cloud(cloud, points_per_cloud, rng)
            instances.append((cloud, cid, f"{cdir.name}/{path.stem}"))
            file_index += 1
    if not instances:
        raise ValueError(f"dataset root {root} has no instances")
    return LabeledDataset(instances, names, split_tag)


def split(dataset, train_fraction, seed=0):
    """Stratified per-class split with a seeded shuffle."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    train_items, test_items = [], []
    for cid in range(dataset.num_classes):
        members = [inst for inst in dataset.instances if inst[1] == cid]
        order = seeds.substream(seed, seeds.SHUFFLE, cid).permutation(len(members))
        cut = int(round(train_fraction * len(members)))
        train_items.extend(members[i] for i in order[:cut])
        test_items.extend(members[i] for i in order[cut:])
    return (LabeledDataset(train_items, dataset.class_names, "train"),
            LabeledDataset(test_items, dataset.class_names, "test"))
