"""Differentiable layers: RBFN spatial function, convolutional and aggregate
composite layers, a weight-tensor point convolution baseline, dense, batch
norm and ReLU. Every layer carries an analytic backward pass; gradients
flow to all learnable parameters and to input features, never to point
coordinates.

Shapes use B for batch, Q output points, W window size, I input features,
J output features, K spatial-function components, M RBF centers. Offsets
are x - y for each window point x around its output point y.
"""

import numpy as np

DEFAULT_SIGMA = 0.3


def gaussian_rbf(offsets, centers, sigma):
    """exp(-||d - c_m||^2 / (2 sigma^2)) for every offset/center pair.

    offsets: (..., 3), centers: (M, 3) -> (..., M).
    """
    flat = offsets.reshape(-1, 3)
    d2 = flat @ (-2.0 * centers.T)
    d2 += np.einsum("nd,nd->n", flat, flat)[:, None]
    d2 += np.einsum("md,md->m", centers, centers)
    np.maximum(d2, 0.0, out=d2)
    d2 *= -1.0 / (2.0 * sigma * sigma)
    np.exp(d2, out=d2)
    return d2.reshape(offsets.shape[:-1] + (centers.shape[0],))


def _rbf_center_grads(d_h, h, offsets, centers, sigma):
    """Gradient of sum(d_h * H) w.r.t. the centers.

    dH/dc_m = H * ((d - c_m) / sigma^2), accumulated over all offsets.
    """
    g = (d_h * h).reshape(-1, centers.shape[0])
    flat = offsets.reshape(-1, 3)
    return (g.T @ flat - centers * g.sum(axis=0)[:, None]) / (sigma * sigma)


class Layer:
    """Named parameters plus matching gradient buffers."""

    def __init__(self):
        self.params = {}
        self.grads = {}

    def sublayers(self):
        return ()

    def zero_grads(self):
        for key, value in self.params.items():
            self.grads[key] = np.zeros_like(value)
        for _, sub in self.sublayers():
            sub.zero_grads()

    def param_entries(self, prefix=""):
        """Yield (name, layer, key) for every learnable tensor, depth first."""
        for key in self.params:
            yield prefix + key, self, key
        for name, sub in self.sublayers():
            yield from sub.param_entries(f"{prefix}{name}.")

    def param_count(self):
        own = sum(v.size for v in self.params.values())
        return own + sum(sub.param_count() for _, sub in self.sublayers())


class RbfSpatialFn(Layer):
    """s_k(d) = sum_m v_km * exp(-||d - c_m||^2 / (2 sigma^2)).

    Centers and the mixing matrix v are learnable; sigma is a fixed width
    shared by all basis functions.
    """

    def __init__(self, num_centers, out_dim, sigma=DEFAULT_SIGMA, rng=None,
                 dtype=np.float64):
        super().__init__()
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        rng = rng or np.random.default_rng(0)
        self.num_centers = num_centers
        self.out_dim = out_dim
        self.sigma = float(sigma)
        self.params["centers"] = rng.uniform(-0.5, 0.5, (num_centers, 3)).astype(dtype)
        self.params["v"] = rng.normal(0.0, num_centers ** -0.5,
                                      (out_dim, num_centers)).astype(dtype)
        self.zero_grads()
        self._cache = None

    def forward(self, offsets):
        h = gaussian_rbf(offsets, self.params["centers"], self.sigma)
        self._cache = (offsets, h)
        out = h.reshape(-1, self.num_centers) @ self.params["v"].T
        return out.reshape(h.shape[:-1] + (self.out_dim,))

    def backward(self, d_out):
        offsets, h = self._cache
        m = self.num_centers
        flat_h = h.reshape(-1, m)
        flat_d = d_out.reshape(-1, self.out_dim)
        self.grads["v"] += flat_d.T @ flat_h
        d_h = flat_d @ self.params["v"]
        self.grads["centers"] += _rbf_center_grads(
            d_h.reshape(h.shape), h, offsets, self.params["centers"], self.sigma)


class ConvCompositeLayer(Layer):
    """Point convolution factored through the spatial function:
    psi_j(y) = sum_{x in X_y} sum_i phi_i(x) sum_k w_jik s_k(x - y).
    """

    def __init__(self, in_width, out_width, spatial_dim, num_centers,
                 sigma=DEFAULT_SIGMA, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_width = in_width
        self.out_width = out_width
        self.spatial = RbfSpatialFn(num_centers, spatial_dim, sigma, rng, dtype)
        fan_in = in_width * spatial_dim
        self.params["w"] = rng.normal(0.0, fan_in ** -0.5,
                                      (out_width, in_width, spatial_dim)).astype(dtype)
        self.zero_grads()
        self._cache = None

    def sublayers(self):
        return (("spatial", self.spatial),)

    def forward(self, offsets, features):
        if features.shape[-1] != self.in_width:
            raise ValueError(
                f"feature width mismatch: layer expects I={self.in_width}, "
                f"got {features.shape[-1]}")
        s = self.spatial.forward(offsets)
        b, q, _, i = features.shape
        j, _, k = self.params["w"].shape
        mixed = np.matmul(features.transpose(0, 1, 3, 2), s)
        out = mixed.reshape(b * q, i * k) @ self.params["w"].reshape(j, i * k).T
        self._cache = (features, s, mixed)
        return out.reshape(b, q, j)

    def backward(self, upstream):
        features, s, mixed = self._cache
        w = self.params["w"]
        b, q, _, i = features.shape
        j, _, k = w.shape
        up = upstream.reshape(b * q, j)
        flat_mixed = mixed.reshape(b * q, i * k)
        self.grads["w"] += (up.T @ flat_mixed).reshape(j, i, k)
        d_mixed = (up @ w.reshape(j, i * k)).reshape(b, q, i, k)
        d_s = np.matmul(features, d_mixed)
        d_features = np.matmul(s, d_mixed.transpose(0, 1, 3, 2))
        self.spatial.backward(d_s)
        return d_features


def _window_mean_std(values):
    """Mean and (W-1)-denominator standard deviation over the window axis.

    values: (B, Q, W, C) -> mean (B, Q, C), std (B, Q, C), plus the
    deviations retained for the backward pass.
    """
    w = values.shape[2]
    mean = values.mean(axis=2)
    dev = values - mean[:, :, None, :]
    var = np.einsum("bqwc,bqwc->bqc", dev, dev) / (w - 1)
    # a window of identical values must give std exactly 0, not the ~1 ulp
    # residue of the rounded mean
    spread = values.max(axis=2) - values.min(axis=2)
    var = np.where(spread == 0.0, 0.0, var)
    return mean, np.sqrt(var), dev


class AggrCompositeLayer(Layer):
    """Nonlinear composite layer over pooled statistics:
    psi_j(y) = theta(y)^T W_j eta(y) with theta = [mean; std] of the
    spatial-function outputs and eta = [mean; std] of the input features
    over the window.
    """

    def __init__(self, in_width, out_width, spatial_dim, num_centers,
                 sigma=DEFAULT_SIGMA, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_width = in_width
        self.out_width = out_width
        self.spatial = RbfSpatialFn(num_centers, spatial_dim, sigma, rng, dtype)
        fan_in = 4 * in_width * spatial_dim
        self.params["w"] = rng.normal(
            0.0, fan_in ** -0.5,
            (out_width, 2 * in_width, 2 * spatial_dim)).astype(dtype)
        self.zero_grads()
        self._cache = None

    def sublayers(self):
        return (("spatial", self.spatial),)

    def forward(self, offsets, features):
        if features.shape[-1] != self.in_width:
            raise ValueError(
                f"feature width mismatch: layer expects I={self.in_width}, "
                f"got {features.shape[-1]}")
        if features.shape[2] < 2:
            raise ValueError("aggregate layer needs window_size >= 2")
        s = self.spatial.forward(offsets)
        s_mean, s_std, s_dev = _window_mean_std(s)
        f_mean, f_std, f_dev = _window_mean_std(features)
        theta = np.concatenate([s_mean, s_std], axis=-1)
        eta = np.concatenate([f_mean, f_std], axis=-1)
        b, q, kk = theta.shape
        w = self.params["w"]
        j, ii, _ = w.shape
        # out_j = theta^T W_j eta, via A[p, j, i] = sum_k W[j, i, k] theta[p, k]
        a = (theta.reshape(b * q, kk) @ w.reshape(j * ii, kk).T).reshape(b * q, j, ii)
        out = np.matmul(a, eta.reshape(b * q, ii, 1))[..., 0]
        self._cache = (s_std, s_dev, f_std, f_dev, theta, eta, a)
        return out.reshape(b, q, j)

    def backward(self, upstream):
        s_std, s_dev, f_std, f_dev, theta, eta, a = self._cache
        w = self.params["w"]
        j, ii, kk = w.shape
        b, q, _ = theta.shape
        window = s_dev.shape[2]
        up = upstream.reshape(b * q, j)
        d_eta = np.matmul(up[:, None, :], a)[:, 0, :].reshape(b, q, ii)
        d_a = np.matmul(up[:, :, None], eta.reshape(b * q, 1, ii))
        self.grads["w"] += (d_a.reshape(b * q, j * ii).T
                            @ theta.reshape(b * q, kk)).reshape(j, ii, kk)
        d_theta = (d_a.reshape(b * q, j * ii) @ w.reshape(j * ii, kk)).reshape(b, q, kk)
        d_s = self._pool_backward(d_theta, s_std, s_dev, window)
        d_features = self._pool_backward(d_eta, f_std, f_dev, window)
        self.spatial.backward(d_s)
        return d_features

    @staticmethod
    def _pool_backward(d_pooled, std, dev, window):
        c = std.shape[-1]
        d_mean, d_std = d_pooled[..., :c], d_pooled[..., c:]
        # d std / d x_w = dev_w / ((W-1) * std); zero spread gets zero grad.
        scale = np.zeros_like(std)
        np.divide(d_std, std, out=scale, where=std > 0.0)
        return (d_mean[:, :, None, :] / window
                + dev * scale[:, :, None, :] / (window - 1))


class BaselinePointConvLayer(Layer):
    """Weight-tensor point convolution with Gaussian correlations:
    psi_j(y) = sum_{x in X_y} sum_i phi_i(x) sum_m wt_jim H_m(x - y).
    """

    def __init__(self, in_width, out_width, num_centers, sigma=DEFAULT_SIGMA,
                 rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.in_width = in_width
        self.out_width = out_width
        self.num_centers = num_centers
        self.sigma = float(sigma)
        self.params["centers"] = rng.uniform(-0.5, 0.5, (num_centers, 3)).astype(dtype)
        fan_in = in_width * num_centers
        self.params["wtilde"] = rng.normal(
            0.0, fan_in ** -0.5, (out_width, in_width, num_centers)).astype(dtype)
        self.zero_grads()
        self._cache = None

    def forward(self, offsets, features):
        if features.shape[-1] != self.in_width:
            raise ValueError(
                f"feature width mismatch: layer expects I={self.in_width}, "
                f"got {features.shape[-1]}")
        h = gaussian_rbf(offsets, self.params["centers"], self.sigma)
        b, q, _, i = features.shape
        j, _, m = self.params["wtilde"].shape
        mixed = np.matmul(features.transpose(0, 1, 3, 2), h)
        out = mixed.reshape(b * q, i * m) @ self.params["wtilde"].reshape(j, i * m).T
        self._cache = (offsets, features, h, mixed)
        return out.reshape(b, q, j)

    def backward(self, upstream):
        offsets, features, h, mixed = self._cache
        wt = self.params["wtilde"]
        b, q, _, i = features.shape
        j, _, m = wt.shape
        up = upstream.reshape(b * q, j)
        self.grads["wtilde"] += (up.T @ mixed.reshape(b * q, i * m)).reshape(j, i, m)
        d_mixed = (up @ wt.reshape(j, i * m)).reshape(b, q, i, m)
        d_h = np.matmul(features, d_mixed)
        d_features = np.matmul(h, d_mixed.transpose(0, 1, 3, 2))
        self.grads["centers"] += _rbf_center_grads(
            d_h, h, offsets, self.params["centers"], self.sigma)
        return d_features


class DenseLayer(Layer):
    """Affine map on the final feature vector."""

    def __init__(self, in_width, out_width, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_width = in_width
        self.out_width = out_width
        self.params["weight"] = rng.normal(
            0.0, in_width ** -0.5, (out_width, in_width)).astype(dtype)
        self.params["bias"] = np.zeros(out_width, dtype=dtype)
        self.zero_grads()
        self._cache = None

    def forward(self, x):
        if x.shape[-1] != self.in_width:
            raise ValueError(
                f"dense input width mismatch: expected {self.in_width}, "
                f"got {x.shape[-1]}")
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, upstream):
        x = self._cache
        self.grads["weight"] += upstream.T @ x
        self.grads["bias"] += upstream.sum(axis=0)
        return upstream @ self.params["weight"]


class BatchNormLayer(Layer):
    """Per-channel batch normalization over feature channels only.

    Training mode normalizes with batch statistics and updates running
    averages (running = momentum * running + (1 - momentum) * batch);
    eval mode normalizes with the running averages.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float64):
        super().__init__()
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        # exponential moving averages stored raw and bias-corrected on use,
        # so eval statistics are meaningful from the very first update
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.zeros(channels, dtype=dtype),
            "updates": np.zeros(1, dtype=dtype),
        }
        self.zero_grads()
        self._cache = None

    def running_stats(self):
        """Bias-corrected running mean and variance ((0, 1) before any
        training update)."""
        t = float(self.buffers["updates"][0])
        if t == 0.0:
            return (np.zeros(self.channels, dtype=self.params["gamma"].dtype),
                    np.ones(self.channels, dtype=self.params["gamma"].dtype))
        correction = 1.0 - self.momentum ** t
        return (self.buffers["running_mean"] / correction,
                self.buffers["running_var"] / correction)

    def forward(self, x, train):
        if x.shape[-1] != self.channels:
            raise ValueError(
                f"batch norm channel mismatch: expected {self.channels}, "
                f"got {x.shape[-1]}")
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            mom = self.momentum
            self.buffers["running_mean"] = mom * self.buffers["running_mean"] + (1 - mom) * mean
            self.buffers["running_var"] = mom * self.buffers["running_var"] + (1 - mom) * var
            self.buffers["updates"] = self.buffers["updates"] + 1.0
        else:
            mean, var = self.running_stats()
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train, x.shape[0])
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, upstream):
        xhat, inv_std, train, n = self._cache
        self.grads["gamma"] += np.einsum("nc,nc->c", upstream, xhat)
        self.grads["beta"] += upstream.sum(axis=0)
        d_xhat = upstream * self.params["gamma"]
        if not train:
            return d_xhat * inv_std
        return (inv_std / n) * (
            n * d_xhat
            - d_xhat.sum(axis=0)
            - xhat * np.einsum("nc,nc->c", d_xhat, xhat)
        )


def relu_forward(x):
    mask = x > 0.0
    return x * mask, mask


def relu_backward(upstream, mask):
    return upstream * mask


def conv_composite_param_count(in_width, out_width, spatial_dim, num_centers):
    return (out_width * in_width * spatial_dim
            + spatial_dim * num_centers + 3 * num_centers)


def aggr_composite_param_count(in_width, out_width, spatial_dim, num_centers):
    return (out_width * 2 * in_width * 2 * spatial_dim
            + spatial_dim * num_centers + 3 * num_centers)


def baseline_param_count(in_width, out_width, num_centers):
    return out_width * in_width * num_centers + 3 * num_centers
