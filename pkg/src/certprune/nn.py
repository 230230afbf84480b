"""Layer kinds (affine, conv2d, batch-norm, ReLU, flatten) and their forward rules."""

import numpy as np

from . import autodiff as ad


class Affine:
    kind = "affine"

    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.W = ad.Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.b = ad.Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return {"W": self.W, "b": self.b}


class Conv2d:
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.W = ad.Tensor(np.zeros((out_channels, in_channels, kernel, kernel)), requires_grad=True)
        self.b = ad.Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return {"W": self.W, "b": self.b}

    def out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


class BatchNorm:
    """y = (x - E[x]) / sqrt(Var[x] + eps) * gamma + beta, per channel."""

    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = ad.Tensor(np.ones(channels), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def scale_shift(self):
        """Per-channel (s, t) with eval-mode BN(x) = s * x + t, in float64."""
        var = self.running_var.astype(np.float64) + self.eps
        if np.any(var <= 0):
            raise ValueError("BatchNorm variance + eps must be positive")
        s = self.gamma.data.astype(np.float64) / np.sqrt(var)
        t = self.beta.data.astype(np.float64) - s * self.running_mean.astype(np.float64)
        return s, t


class ReLU:
    kind = "relu"

    def params(self):
        return {}


class Flatten:
    kind = "flatten"

    def params(self):
        return {}


def channel_view(v, ndim):
    """Reshape a per-channel vector to broadcast against (N, C, ...) data."""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _check_input(layer, x, expected):
    if x.ndim < 2 or x.shape[1:] != tuple(expected):
        raise ValueError(f"{layer.kind} layer expects (N, {', '.join(map(str, expected))}), got {x.shape}")


def layer_forward(layer, x, mode="eval", stats=None):
    """Apply one layer to a batch.

    ``mode`` is "train", "batch" or "eval".  In train mode a BatchNorm layer
    normalizes with batch statistics, updates its running statistics, and
    stores the (mean, var) tensors in ``stats[id(layer)]`` when ``stats`` is a
    dict.  "batch" normalizes with batch statistics but leaves the running
    statistics alone (used for attack gradients during training).
    """
    x = ad.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ValueError(f"non-finite input to {layer.kind} layer")
    if layer.kind == "affine":
        _check_input(layer, x, (layer.in_features,))
        return ad.linear(x, layer.W, layer.b)
    if layer.kind == "conv":
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise ValueError(f"conv layer expects (N, {layer.in_channels}, H, W), got {x.shape}")
        return ad.conv2d(x, layer.W, layer.b, layer.stride, layer.padding)
    if layer.kind == "bn":
        if x.ndim < 2 or x.shape[1] != layer.channels:
            raise ValueError(f"bn layer expects {layer.channels} channels, got {x.shape}")
        gamma = channel_view(layer.gamma, x.ndim)
        beta = channel_view(layer.beta, x.ndim)
        if mode in ("train", "batch"):
            axes = (0,) + tuple(range(2, x.ndim))
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            if mode == "train":
                n = x.data.size // layer.channels
                m = layer.momentum
                bm = mean.data.reshape(-1)
                bv = var.data.reshape(-1) * (n / max(n - 1, 1))
                layer.running_mean = ((1 - m) * layer.running_mean + m * bm).astype(np.float32)
                layer.running_var = ((1 - m) * layer.running_var + m * bv).astype(np.float32)
            if stats is not None:
                stats[id(layer)] = (mean, var)
            return centered / ad.sqrt(var + layer.eps) * gamma + beta
        mean = channel_view(layer.running_mean, x.ndim)
        var = channel_view(layer.running_var, x.ndim)
        return (x - mean) / np.sqrt(var + np.float32(layer.eps)) * gamma + beta
    if layer.kind == "relu":
        return ad.relu(x)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    raise ValueError(f"unknown layer kind {layer.kind!r}")
