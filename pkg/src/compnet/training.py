"""Losses, the Adam optimizer, and the mini-batch training loop."""

import csv
from dataclasses import dataclass

import numpy as np

from . import seeds


class TrainingDiverged(RuntimeError):
    pass


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood over the batch.

    Returns (loss, d_logits) with d_logits = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must be ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    probs = softmax(logits)
    picked = probs[np.arange(b), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def dsvdd_loss(embeddings, center, noise_sigma=0.01, rng=None, noise=None):
    """Mean squared distance of (possibly noise-perturbed) embeddings from
    the fixed center. The per-item noise keeps the network from collapsing
    onto the trivial constant map.

    Returns (loss, d_embeddings). Pass an explicit `noise` array to freeze
    the perturbation (e.g. for finite-difference checks).
    """
    z = np.asarray(embeddings, dtype=float)
    center = np.asarray(center, dtype=float)
    if z.ndim != 2 or center.shape != (z.shape[1],):
        raise ValueError("embeddings must be (B, d) with matching center")
    if noise is None:
        if noise_sigma > 0.0:
            rng = rng if rng is not None else np.random.default_rng(0)
            noise = rng.normal(0.0, noise_sigma, z.shape)
        else:
            noise = 0.0
    diff = z + noise - center
    loss = float((diff * diff).sum(axis=1).mean())
    return loss, 2.0 * diff / z.shape[0]


class Adam:
    """Bias-corrected Adam; moments keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, entries):
        """entries: iterable of (name, param_array, grad_array); updates the
        parameters in place."""
        self.step_count += 1
        t = self.step_count
        for name, param, grad in entries:
            if not np.isfinite(grad).all():
                raise TrainingDiverged(f"diverged: non-finite gradient for {name}")
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step_network(self, net):
        self.step(
            (name, layer.params[key], layer.grads[key])
            for name, layer, key in net.param_entries())


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    loss_kind: str = "cross_entropy"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise_sigma: float = 0.01
    dsvdd_center: np.ndarray = None
    log_path: str = None
    verbose: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in ("cross_entropy", "dsvdd"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def _batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def train(net, items, config):
    """Train the network on (PointCloud, label) pairs.

    Shuffles each epoch with a seed-derived stream and returns the list of
    per-epoch statistics. For the dsvdd loss kind, labels are ignored and
    config.dsvdd_center must be set; accuracy is reported as nan.
    """
    if not items:
        raise ValueError("empty training set")
    if config.loss_kind == "dsvdd" and config.dsvdd_center is None:
        raise ValueError("dsvdd training requires config.dsvdd_center")

    points = np.stack([cloud.points for cloud, _ in items])
    features = np.stack([cloud.features for cloud, _ in items])
    labels = np.array([label for _, label in items], dtype=np.intp)

    optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps)
    log = []
    for epoch in range(config.epochs):
        order = seeds.substream(config.seed, seeds.SHUFFLE, epoch).permutation(len(items))
        total_loss = 0.0
        total_correct = 0
        for batch_index, batch in enumerate(_batches(order, config.batch_size)):
            logits = net.forward(points[batch], features[batch], train=True,
                                 sample_key=(config.seed, epoch, batch_index))
            if config.loss_kind == "cross_entropy":
                loss, d_logits = cross_entropy_loss(logits, labels[batch])
                total_correct += int((logits.argmax(axis=1) == labels[batch]).sum())
            else:
                noise_rng = seeds.substream(config.seed, seeds.NOISE, epoch, batch_index)
                loss, d_logits = dsvdd_loss(logits, config.dsvdd_center,
                                            config.noise_sigma, noise_rng)
            net.zero_grads()
            net.backward(d_logits)
            optimizer.step_network(net)
            total_loss += loss * len(batch)
        accuracy = (total_correct / len(items)
                    if config.loss_kind == "cross_entropy" else float("nan"))
        stats = EpochStats(epoch, total_loss / len(items), accuracy)
        log.append(stats)
        if config.verbose:
            print(f"epoch {stats.epoch}: loss {stats.loss:.4f} "
                  f"accuracy {stats.accuracy:.4f}", flush=True)
    if config.log_path:
        write_epoch_log(log, config.log_path)
    return net, log


def write_epoch_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for stats in log:
            writer.writerow([stats.epoch, repr(stats.loss), repr(stats.accuracy)])


def untrained_center(net, clouds, clamp=0.1, sample_key=(0,)):
    """Deep SVDD center: mean embedding of the untrained network over the
    training set, with small coordinates pushed to +-clamp so the network
    cannot shrink the loss by collapsing every input onto the center."""
    embeddings = []
    for index, cloud in enumerate(clouds):
        embeddings.append(net.forward_single(cloud, train=False,
                                             sample_key=(*sample_key, index)))
    center = np.mean(embeddings, axis=0)
    small = np.abs(center) < clamp
    center[small] = np.where(center[small] >= 0.0, clamp, -clamp)
    return center
