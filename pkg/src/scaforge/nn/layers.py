"""Differentiable layers for 1D trace classification, in plain numpy.

Every layer caches what its backward pass needs during forward and exposes
aligned `params` / `grads` lists for the optimizer. Shapes follow the
(batch, channels, length) convention for convolutional layers and
(batch, features) for dense ones. All math is float64.
"""

from __future__ import annotations

import numpy as np


class Layer:
    """Base: a layer owns params/grads lists (possibly empty) and buffers."""

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        self.param_names: list[str] = []
        self.buffers: list[np.ndarray] = []
        self.buffer_names: list[str] = []

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    """Same-length 1D convolution (stride 1) via an im2col gather.

    weight: (out_channels, in_channels, kernel), bias: (out_channels,).
    """

    def __init__(self, in_channels, out_channels, kernel, padding, rng):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if padding != (kernel - 1) // 2:
            raise ValueError("padding must equal (kernel - 1) / 2")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.padding = padding
        self.w = kaiming_uniform(rng, (out_channels, in_channels, kernel),
                                 fan_in=in_channels * kernel)
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.params = [self.w, self.b]
        self.grads = [self.dw, self.db]
        self.param_names = ["w", "b"]
        self._cache = None

    def _gather_index(self, length):
        # (length, kernel) window positions into the padded signal
        return np.arange(length)[:, None] + np.arange(self.kernel)[None, :]

    def forward(self, x, train=False, rng=None):
        b, c, length = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding)))
        idx = self._gather_index(length)
        patches = xp[:, :, idx]                      # (B, C_in, L, K)
        out = np.einsum("bclk,ock->bol", patches, self.w, optimize=True)
        out += self.b[:, None]
        self._cache = (patches, x.shape)
        return out

    def backward(self, dout):
        patches, x_shape = self._cache
        b, c, length = x_shape
        self.dw[...] = np.einsum("bol,bclk->ock", dout, patches, optimize=True)
        self.db[...] = dout.sum(axis=(0, 2))
        dpatches = np.einsum("bol,ock->bclk", dout, self.w, optimize=True)
        dxp = np.zeros((b, c, length + 2 * self.padding))
        idx = self._gather_index(length)
        np.add.at(dxp, (slice(None), slice(None), idx), dpatches)
        return dxp[:, :, self.padding:self.padding + length]


class BatchNorm1d(Layer):
    """Per-channel batch normalization over (batch, length).

    Train mode normalizes with batch statistics (population variance) and
    updates the running estimates; eval mode uses the running estimates.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.dgamma = np.zeros(channels)
        self.dbeta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.params = [self.gamma, self.beta]
        self.grads = [self.dgamma, self.dbeta]
        self.param_names = ["gamma", "beta"]
        self.buffers = [self.running_mean, self.running_var]
        self.buffer_names = ["running_mean", "running_var"]
        self._cache = None

    def forward(self, x, train=False, rng=None):
        if train:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[:, None]) * inv_std[:, None]
        self._cache = (xhat, inv_std, train)
        return self.gamma[:, None] * xhat + self.beta[:, None]

    def backward(self, dout):
        xhat, inv_std, train = self._cache
        self.dgamma[...] = (dout * xhat).sum(axis=(0, 2))
        self.dbeta[...] = dout.sum(axis=(0, 2))
        dxhat = dout * self.gamma[:, None]
        if not train:
            return dxhat * inv_std[:, None]
        n = dout.shape[0] * dout.shape[2]
        mean_dxhat = dxhat.mean(axis=(0, 2))
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=(0, 2))
        return inv_std[:, None] * (dxhat - mean_dxhat[:, None]
                                   - xhat * mean_dxhat_xhat[:, None])


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class AvgPool1d(Layer):
    """kernel 2 / stride 2 average pooling; an odd trailing sample is dropped."""

    def forward(self, x, train=False, rng=None):
        m = x.shape[2] // 2
        self._in_len = x.shape[2]
        return 0.5 * (x[:, :, 0:2 * m:2] + x[:, :, 1:2 * m:2])

    def backward(self, dout):
        b, c, m = dout.shape
        dx = np.zeros((b, c, self._in_len))
        dx[:, :, 0:2 * m:2] = 0.5 * dout
        dx[:, :, 1:2 * m:2] = 0.5 * dout
        return dx


class Flatten(Layer):
    def forward(self, x, train=False, rng=None):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    """Affine map x @ w.T + b with weight (out_features, in_features)."""

    def __init__(self, in_features, out_features, rng):
        super().__init__()
        self.w = kaiming_uniform(rng, (out_features, in_features), fan_in=in_features)
        self.b = np.zeros(out_features)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self.params = [self.w, self.b]
        self.grads = [self.dw, self.db]
        self.param_names = ["w", "b"]
        self._x = None

    def forward(self, x, train=False, rng=None):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dout):
        self.dw[...] = dout.T @ self._x
        self.db[...] = dout.sum(axis=0)
        return dout @ self.w


class Dropout(Layer):
    """Inverted dropout: scaled mask at train time, identity at eval."""

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self._mask = None

    def forward(self, x, train=False, rng=None):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask


def log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n
