"""Assemble composite layers into networks, count parameters, and move
them to and from the binary checkpoint format.

A network alternates composite stages (each followed by batch norm and
ReLU on the features) and ends with a dense layer on the single remaining
point's feature vector. Every forward pass re-samples the output points of
each stage; evaluation callers pass a fixed sample_key for reproducibility.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import seeds
from .geometry import (
    DEFAULT_ATTENUATION,
    nearest_rows,
    squared_distances,
    weighted_spread_draws,
)
from .layers import (
    AggrCompositeLayer,
    BaselinePointConvLayer,
    BatchNormLayer,
    ConvCompositeLayer,
    DenseLayer,
    DEFAULT_SIGMA,
    relu_backward,
    relu_forward,
)

LAYER_KINDS = ("conv_composite", "aggr_composite", "baseline")

CHECKPOINT_MAGIC = b"CPNT"
CHECKPOINT_VERSION = 1

# stage table shared by all classification networks: (J multiplier,
# window size, output count)
CLASSIFICATION_STAGES = ((1, 32, 1024), (2, 32, 256), (4, 16, 64),
                         (4, 16, 16), (8, 16, 1))
# smaller 3-stage table for the Deep SVDD detector
DSVDD_STAGES = ((1, 32, 128), (3, 32, 32), (6, 32, 1))


@dataclass
class NetworkSpec:
    """Architecture description: stage triples are (J, window, outputs)."""

    layer_kind: str
    stages: tuple
    j0: int
    num_centers: int
    spatial_dim: int
    num_outputs: int
    input_width: int = 1
    sigma: float = DEFAULT_SIGMA
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        if self.layer_kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.layer_kind!r}")
        if not self.stages:
            raise ValueError("network needs at least one stage")
        if self.stages[-1][2] != 1:
            raise ValueError("final stage must emit a single point")
        for j, window, count in self.stages:
            if j < 1 or window < 1 or count < 1:
                raise ValueError("stage values must be positive")
            if self.layer_kind == "aggr_composite" and window < 2:
                raise ValueError("aggregate layers need window size >= 2")
        for name in ("j0", "num_centers", "spatial_dim", "num_outputs",
                     "input_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def count_parameters(self):
        """Closed-form learnable-parameter count; equals the introspective
        count of a built network exactly."""
        from .layers import (
            aggr_composite_param_count,
            baseline_param_count,
            conv_composite_param_count,
        )
        total = 0
        in_width = self.input_width
        for j, _, _ in self.stages:
            if self.layer_kind == "conv_composite":
                total += conv_composite_param_count(
                    in_width, j, self.spatial_dim, self.num_centers)
            elif self.layer_kind == "aggr_composite":
                total += aggr_composite_param_count(
                    in_width, j, self.spatial_dim, self.num_centers)
            else:
                total += baseline_param_count(in_width, j, self.num_centers)
            total += 2 * j  # batch norm affine
            in_width = j
        return total + in_width * self.num_outputs + self.num_outputs


def _make_stage_layer(kind, in_width, out_width, spec, rng, dtype):
    if kind == "conv_composite":
        return ConvCompositeLayer(in_width, out_width, spec.spatial_dim,
                                  spec.num_centers, spec.sigma, rng, dtype)
    if kind == "aggr_composite":
        return AggrCompositeLayer(in_width, out_width, spec.spatial_dim,
                                  spec.num_centers, spec.sigma, rng, dtype)
    return BaselinePointConvLayer(in_width, out_width, spec.num_centers,
                                  spec.sigma, rng, dtype)


def _drop_self_column(table, n, b):
    """Remove each point's own entry from its sorted-neighbor row.

    table: (b*n, width) indices sorted by (distance, index) for every point
    of every batch item. Equal to searching with the self entry masked out,
    because removing one element keeps the others' relative order.
    """
    width = table.shape[1]
    self_col = np.tile(np.arange(n), b)
    matches = table == self_col[:, None]
    pos = np.argmax(matches, axis=1)
    # a point buried under more than `width` exact duplicates never shows
    # up in its own row; dropping the last column is then equivalent
    pos = np.where(matches.any(axis=1), pos, width - 1)
    gather = np.arange(width - 1) + (np.arange(width - 1) >= pos[:, None])
    return np.take_along_axis(table, gather, axis=1)


class Network:
    """Stack of composite stages plus a dense head, with manual reverse-mode
    gradients. Parameters live on the layers; the network orchestrates the
    per-stage geometry (output-point sampling, window search, gathers)."""

    def __init__(self, spec, init_seed=0, dtype=np.float64,
                 sorted_accumulation=False, exclude_center=False,
                 attenuation=DEFAULT_ATTENUATION):
        self.spec = spec
        self.dtype = np.dtype(dtype).type
        self.sorted_accumulation = sorted_accumulation
        self.exclude_center = exclude_center
        self.attenuation = attenuation
        self.train_seed = 0

        self.stages = []
        in_width = spec.input_width
        for index, (j, _, _) in enumerate(spec.stages):
            rng = seeds.substream(init_seed, seeds.INIT, index)
            layer = _make_stage_layer(spec.layer_kind, in_width, j, spec, rng, self.dtype)
            bn = BatchNormLayer(j, spec.bn_momentum, spec.bn_eps, self.dtype)
            self.stages.append((layer, bn))
            in_width = j
        rng = seeds.substream(init_seed, seeds.INIT, len(spec.stages))
        self.dense = DenseLayer(in_width, spec.num_outputs, rng, self.dtype)
        self._cache = None

    # -- parameter plumbing -------------------------------------------------

    def named_layers(self):
        for i, (layer, bn) in enumerate(self.stages):
            yield f"stage{i}", layer
            yield f"stage{i}.bn", bn
        yield "dense", self.dense

    def param_entries(self):
        for prefix, layer in self.named_layers():
            yield from layer.param_entries(f"{prefix}.")

    def buffer_entries(self):
        for prefix, layer in self.named_layers():
            for key in getattr(layer, "buffers", {}):
                yield f"{prefix}.{key}", layer, key

    def zero_grads(self):
        for _, layer in self.named_layers():
            layer.zero_grads()

    def count_parameters(self):
        return sum(layer.params[key].size for _, layer, key in self.param_entries())

    # -- geometry helpers ---------------------------------------------------

    def _stage_geometry(self, points, count, window, rngs):
        """Sample `count` output points per batch item and build their
        windows. points: (B, N, 3) -> outputs (B, count, 3), indices
        (B, count, window)."""
        b, n, _ = points.shape
        uniforms = np.stack([rng.random(count) for rng in rngs])
        if n == 1:
            out_idx = np.zeros((b, count), dtype=np.intp)
            win_idx = np.zeros((b, count, window), dtype=np.intp)
        else:
            d2 = np.empty((b, n, n), dtype=points.dtype)
            for bi in range(b):
                d2[bi] = squared_distances(points[bi], points[bi])
            k = min(8, n - 1)
            # one partial sort per stage serves both the sampler's neighbor
            # table and the window lookups
            width = min(max(window, k + 1), n)
            table = nearest_rows(d2.reshape(b * n, n), width)
            nbrs = _drop_self_column(table, n, b)[:, :k].reshape(b, n, k)
            out_idx = weighted_spread_draws(uniforms, nbrs, self.attenuation)

            batch_rows = np.arange(b)[:, None]
            if self.exclude_center:
                rows = d2[batch_rows, out_idx].reshape(b * count, n)
                outputs = points[batch_rows, out_idx]
                coincident = (outputs[:, :, None, :] == points[:, None, :, :]).all(axis=3)
                rows = np.where(coincident.reshape(b * count, n), np.inf, rows)
                sorted_rows = nearest_rows(rows, min(window, n)).reshape(b, count, -1)
            else:
                sorted_rows = table.reshape(b, n, width)[batch_rows, out_idx]
            if n >= window:
                win_idx = np.ascontiguousarray(sorted_rows[:, :, :window])
            else:
                reps = -(-window // n)
                win_idx = np.tile(sorted_rows, (1, 1, reps))[:, :, :window]
        if self.sorted_accumulation:
            win_idx = np.sort(win_idx, axis=2)
        outputs = points[np.arange(b)[:, None], out_idx]
        return outputs, win_idx

    # -- forward / backward -------------------------------------------------

    def forward(self, points, features, train, sample_key=(0,),
                shared_sampling=False):
        """points: (B, N, 3), features: (B, N, I) -> (B, num_outputs).

        sample_key seeds the per-stage output-point sampling; training
        callers vary it per batch, evaluation callers keep it fixed. With
        shared_sampling every batch item uses the stream that item 0 of a
        single-item batch would get, so scoring several versions of one
        cloud in a batch reproduces the sequential per-cloud results.
        """
        points = np.asarray(points, dtype=self.dtype)
        features = np.asarray(features, dtype=self.dtype)
        if points.ndim != 3 or features.ndim != 3:
            raise ValueError("forward expects batched (B, N, ...) arrays")
        b = points.shape[0]
        rngs = [seeds.substream(seeds.SAMPLING, *sample_key,
                                0 if shared_sampling else bi)
                for bi in range(b)]

        cache = []
        for layer, bn in self.stages:
            _, window, count = self.spec.stages[len(cache)]
            outputs, win_idx = self._stage_geometry(points, count, window, rngs)
            rows = np.arange(b)[:, None, None]
            gathered = points[rows, win_idx]
            offsets = gathered - outputs[:, :, None, :]
            win_feats = features[rows, win_idx]
            z = layer.forward(offsets, win_feats)
            flat = z.reshape(-1, z.shape[-1])
            normed = bn.forward(flat, train)
            activated, mask = relu_forward(normed)
            cache.append((win_idx, points.shape[1], mask))
            points = outputs
            features = activated.reshape(z.shape)
        pooled = features.reshape(b, -1)
        logits = self.dense.forward(pooled)
        self._cache = cache
        return logits

    def backward(self, d_logits):
        """Accumulate gradients for the most recent forward pass. Gradients
        flow to every learnable parameter and through input features;
        point coordinates receive none."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        d = self.dense.backward(np.asarray(d_logits, dtype=self.dtype))
        b = d.shape[0]
        d = d.reshape(b, 1, -1)
        for stage_index in range(len(self.stages) - 1, -1, -1):
            layer, bn = self.stages[stage_index]
            win_idx, n_prev, mask = self._cache[stage_index]
            flat = d.reshape(-1, d.shape[-1])
            flat = relu_backward(flat, mask)
            flat = bn.backward(flat)
            d_win = layer.backward(flat.reshape(d.shape))
            if stage_index == 0:
                break
            in_width = d_win.shape[-1]
            # scatter-add window gradients back to the previous stage's
            # features; bincount accumulates in element order
            flat_idx = (win_idx + np.arange(b)[:, None, None] * n_prev).ravel()
            flat_win = d_win.reshape(-1, in_width)
            d_prev = np.empty((b * n_prev, in_width), dtype=self.dtype)
            for i in range(in_width):
                d_prev[:, i] = np.bincount(flat_idx, weights=flat_win[:, i],
                                           minlength=b * n_prev)
            d = d_prev.reshape(b, n_prev, in_width)

    def forward_single(self, cloud, train=False, sample_key=(0,)):
        """Convenience wrapper for one point cloud."""
        logits = self.forward(cloud.points[None], cloud.features[None],
                              train, sample_key)
        return logits[0]


def build_classification_net(kind, j0, num_centers, spatial_dim, num_classes,
                             sigma=DEFAULT_SIGMA, input_width=1, init_seed=0,
                             dtype=np.float64, **net_kwargs):
    """Five composite stages with output widths (1,2,4,4,8) x J0, window
    sizes (32,32,16,16,16) and output counts (1024,256,64,16,1), each
    followed by batch norm + ReLU, then a dense layer to the class logits."""
    spec = classification_spec(kind, j0, num_centers, spatial_dim,
                               num_classes, sigma, input_width)
    return Network(spec, init_seed, dtype, **net_kwargs)


def build_dsvdd_net(kind, j0, num_centers, spatial_dim, latent_dim,
                    sigma=DEFAULT_SIGMA, input_width=1, init_seed=0,
                    dtype=np.float64, **net_kwargs):
    """Three composite stages with widths (1,3,6) x J0, windows of 32 and
    output counts (128,32,1), then a dense layer to the latent embedding."""
    stages = tuple((mult * j0, window, count)
                   for mult, window, count in DSVDD_STAGES)
    spec = NetworkSpec(kind, stages, j0, num_centers, spatial_dim,
                       latent_dim, input_width, sigma)
    return Network(spec, init_seed, dtype, **net_kwargs)


def count_parameters(net_or_spec):
    """Learnable scalar count of a built network (introspective) or of a
    NetworkSpec (closed form); the two agree exactly."""
    return net_or_spec.count_parameters()


def classification_spec(kind, j0, num_centers, spatial_dim, num_classes,
                        sigma=DEFAULT_SIGMA, input_width=1):
    stages = tuple((mult * j0, window, count)
                   for mult, window, count in CLASSIFICATION_STAGES)
    return NetworkSpec(kind, stages, j0, num_centers, spatial_dim,
                       num_classes, input_width, sigma)


# -- checkpoint format -------------------------------------------------------
#
#   magic "CPNT" | version u16 | header_len u32 | header json (spec + seed)
#   | record_count u32 | records
#   record: name_len u16 | name utf-8 | ndim u8 | dims u32 each | f32 data
#
# all integers little-endian; tensors little-endian float32.


class CheckpointError(ValueError):
    pass


def _records(net):
    for name, layer, key in net.param_entries():
        yield name, layer.params, key
    for name, layer, key in net.buffer_entries():
        yield name, layer.buffers, key


def save_checkpoint(net, path):
    header = json.dumps({
        "spec": json.loads(net.spec.to_json()),
        "train_seed": net.train_seed,
        "sorted_accumulation": net.sorted_accumulation,
        "exclude_center": net.exclude_center,
        "attenuation": net.attenuation,
    }, sort_keys=True).encode("utf-8")
    records = list(_records(net))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, store, key in records:
            encoded = name.encode("utf-8")
            tensor = np.ascontiguousarray(store[key], dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, count, what):
        if self.offset + count > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: wanted {count} bytes for {what} "
                f"at offset {self.offset}, file has {len(self.data)}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, dtype=np.float64):
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (header_len,) = reader.unpack("<I", "header length")
    header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    spec = NetworkSpec(**header["spec"])
    net = Network(spec, init_seed=0, dtype=dtype,
                  sorted_accumulation=header.get("sorted_accumulation", False),
                  exclude_center=header.get("exclude_center", False),
                  attenuation=header.get("attenuation", DEFAULT_ATTENUATION))
    net.train_seed = header.get("train_seed", 0)

    targets = {name: (store, key) for name, store, key in _records(net)}
    (count,) = reader.unpack("<I", "record count")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "ndim")
        shape = reader.unpack(f"<{ndim}I", "shape") if ndim else ()
        numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.take(4 * numel, f"tensor {name}")
        tensor = np.frombuffer(raw, dtype="<f4").reshape(shape)
        if name not in targets:
            raise CheckpointError(f"unknown tensor {name!r}")
        store, key = targets[name]
        if store[key].shape != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tensor.shape}, "
                f"network {store[key].shape}")
        store[key] = tensor.astype(net.dtype)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    net.zero_grads()
    return net
