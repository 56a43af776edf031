"""Hand-written forward/backward kernels for the layer types of the 1D-CNN.

Every layer has the same two-call surface::

    out, cache = layer.forward(x, training, rng)
    grad_x, grads = layer.backward(cache, grad_out)

``grads`` maps parameter names to arrays shaped like the parameters. Arrays
are [batch, channels, length] for the 1D layers and [batch, features] for
dense layers. Computation happens in the parameters' dtype (float32 for
training, float64 for gradient checking).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in activations, loss or gradients."""


# --------------------------------------------------------------------------
# functional kernels
# --------------------------------------------------------------------------

def conv1d_out_len(length: int, kernel: int, stride: int = 1) -> int:
    return (length - kernel) // stride + 1


def _im2col(x, k, stride):
    """[B, C, L] -> [C*K, B*L_out] column matrix (contiguous)."""
    batch, channels, _ = x.shape
    win = sliding_window_view(x, k, axis=2)[:, :, ::stride]  # [B, C, L_out, K]
    l_out = win.shape[2]
    return win.transpose(1, 3, 0, 2).reshape(channels * k, batch * l_out)


def conv1d_forward(x, weight, bias, stride=1):
    """VALID cross-correlation: out[b,o,i] = bias[o] + sum_{c,k} w[o,c,k] x[b,c,i*stride+k]."""
    batch, c_in, length = x.shape
    c_out, w_in, k = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv expects {w_in} input channels, got {c_in}")
    if length < k:
        raise ShapeError(f"input length {length} shorter than kernel {k}")
    l_out = conv1d_out_len(length, k, stride)
    cols = _im2col(x, k, stride)
    out = weight.reshape(c_out, c_in * k) @ cols
    out += bias[:, None]
    out = out.reshape(c_out, batch, l_out).transpose(1, 0, 2)
    return np.ascontiguousarray(out), (cols, x.shape, weight, stride)


def conv1d_backward(cache, grad_out, need_input_grad=True):
    cols, x_shape, weight, stride = cache
    batch, c_in, length = x_shape
    c_out, _, k = weight.shape
    l_out = grad_out.shape[2]
    g = grad_out.transpose(1, 0, 2).reshape(c_out, batch * l_out)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    grads = {"weight": grad_w, "bias": grad_b}
    if not need_input_grad:
        return None, grads
    dcols = (weight.reshape(c_out, c_in * k).T @ g).reshape(c_in, k, batch, l_out)
    grad_x = np.zeros((c_in, batch, length), dtype=grad_out.dtype)
    span = stride * (l_out - 1) + 1
    for j in range(k):
        grad_x[:, :, j:j + span:stride] += dcols[:, j]
    return np.ascontiguousarray(grad_x.transpose(1, 0, 2)), grads


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalization over the (batch, length) axes.

    In training mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    batch, channels, length = x.shape
    if channels != len(gamma):
        raise ShapeError(f"batchnorm expects {len(gamma)} channels, got {channels}")
    if training:
        if batch * length < 2:
            raise ShapeError("batchnorm needs at least 2 values per channel in training mode")
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[:, None]) * inv_std[:, None]
    out = gamma[:, None] * xhat + beta[:, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(cache, grad_out):
    xhat, inv_std, gamma, training = cache
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2))
    grad_beta = grad_out.sum(axis=(0, 2))
    dxhat = grad_out * gamma[:, None]
    if training:
        n = xhat.shape[0] * xhat.shape[2]
        s1 = dxhat.sum(axis=(0, 2))[:, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2))[:, None]
        grad_x = (inv_std[:, None] / n) * (n * dxhat - s1 - xhat * s2)
    else:
        grad_x = dxhat * inv_std[:, None]
    return grad_x, {"gamma": grad_gamma, "beta": grad_beta}


def maxpool_forward(x, window=2, stride=2):
    """VALID max pooling; a trailing remainder shorter than the window is dropped.

    Ties route the gradient to the lowest-index maximum.
    """
    batch, channels, length = x.shape
    if length < window:
        raise ShapeError(f"input length {length} shorter than pooling window {window}")
    l_out = (length - window) // stride + 1
    if window == stride == 2:
        pairs = x[:, :, :2 * l_out].reshape(batch, channels, l_out, 2)
        second = pairs[..., 1] > pairs[..., 0]
        return np.maximum(pairs[..., 0], pairs[..., 1]), (second, x.shape, window, stride)
    win = sliding_window_view(x, window, axis=2)[:, :, ::stride]
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, window, stride)


def maxpool_backward(cache, grad_out):
    idx, x_shape, window, stride = cache
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    l_out = idx.shape[2]
    if idx.dtype == bool:
        pairs = grad_x[:, :, :2 * l_out].reshape(x_shape[0], x_shape[1], l_out, 2)
        pairs[..., 0] = grad_out * ~idx
        pairs[..., 1] = grad_out * idx
        return grad_x, {}
    span = stride * (l_out - 1) + 1
    zero = grad_out.dtype.type(0)
    for j in range(window):
        grad_x[:, :, j:j + span:stride] += np.where(idx == j, grad_out, zero)
    return grad_x, {}


def dense_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense expects [batch, {weight.shape[1]}], got {list(x.shape)}")
    return x @ weight.T + bias, x


def dense_backward(cache, grad_out, weight):
    x = cache
    return grad_out @ weight, {"weight": grad_out.T @ x, "bias": grad_out.sum(axis=0)}


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, grad_out):
    return grad_out * mask, {}


def dropout_forward(x, rate, training, rng=None):
    """Inverted dropout. Inference (or rate 0) returns the input unchanged."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(mask, grad_out):
    if mask is None:
        return grad_out, {}
    return grad_out * mask, {}


# --------------------------------------------------------------------------
# layer objects
# --------------------------------------------------------------------------

class Layer:
    """Base layer: no parameters, no buffers."""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for key in d:
                d[key] = d[key].astype(dtype)
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


class Conv1d(Layer):
    kind = "conv"

    def __init__(self, name, in_channels, out_channels, kernel, stride=1, dtype=np.float32):
        super().__init__(name)
        # off for a first layer whose input is data: saves the largest scatter
        self.need_input_grad = True
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.stride = stride
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel), dtype=dtype)
        self.params["bias"] = np.zeros(out_channels, dtype=dtype)

    @property
    def fan_in(self):
        _, c, k = self.params["weight"].shape
        return c * k

    def out_shape(self, shape):
        c_out, c_in, k = self.params["weight"].shape
        if shape[0] != c_in:
            raise ShapeError(f"{self.name}: expects {c_in} channels, got {shape[0]}")
        if shape[1] < k:
            raise ShapeError(f"{self.name}: kernel {k} longer than incoming length {shape[1]}")
        return (c_out, conv1d_out_len(shape[1], k, self.stride))

    def forward(self, x, training=False, rng=None):
        return conv1d_forward(x, self.params["weight"], self.params["bias"], self.stride)

    def backward(self, cache, grad_out):
        return conv1d_backward(cache, grad_out, self.need_input_grad)


class BatchNorm1d(Layer):
    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__(name)
        if not 0 < momentum < 1 or eps <= 0:
            raise ValueError("batchnorm needs 0 < momentum < 1 and eps > 0")
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, training=False, rng=None):
        return batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            training, self.momentum, self.eps,
        )

    def backward(self, cache, grad_out):
        return batchnorm_backward(cache, grad_out)


class MaxPool1d(Layer):
    kind = "maxpool"

    def __init__(self, name, window=2, stride=2):
        super().__init__(name)
        self.window = window
        self.stride = stride

    def out_shape(self, shape):
        if shape[1] < self.window:
            raise ShapeError(f"{self.name}: pooling window {self.window} longer than length {shape[1]}")
        return (shape[0], (shape[1] - self.window) // self.stride + 1)

    def forward(self, x, training=False, rng=None):
        return maxpool_forward(x, self.window, self.stride)

    def backward(self, cache, grad_out):
        return maxpool_backward(cache, grad_out)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, in_dim, out_dim, dtype=np.float32):
        super().__init__(name)
        self.params["weight"] = np.zeros((out_dim, in_dim), dtype=dtype)
        self.params["bias"] = np.zeros(out_dim, dtype=dtype)

    @property
    def fan_in(self):
        return self.params["weight"].shape[1]

    def out_shape(self, shape):
        out_dim, in_dim = self.params["weight"].shape
        if shape != (in_dim,):
            raise ShapeError(f"{self.name}: expects ({in_dim},), got {shape}")
        return (out_dim,)

    def forward(self, x, training=False, rng=None):
        return dense_forward(x, self.params["weight"], self.params["bias"])

    def backward(self, cache, grad_out):
        return dense_backward(cache, grad_out, self.params["weight"])


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        return relu_forward(x)

    def backward(self, cache, grad_out):
        return relu_backward(cache, grad_out)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, rate):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        return dropout_forward(x, self.rate, training, rng)

    def backward(self, cache, grad_out):
        return dropout_backward(cache, grad_out)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), {}


class Unsqueeze(Layer):
    """[B, L] -> [B, 1, L] so a feature vector can enter the conv stack."""

    kind = "unsqueeze"

    def out_shape(self, shape):
        return (1,) + tuple(shape)

    def forward(self, x, training=False, rng=None):
        return x[:, None, :], None

    def backward(self, cache, grad_out):
        return grad_out[:, 0, :], {}


def layer_backward(layer: Layer, cache, grad_out):
    """Gradient of ``layer`` w.r.t. its input and parameters, given its forward cache."""
    if cache is None and layer.kind not in ("dropout", "unsqueeze"):
        raise ValueError(f"{layer.name}: missing forward cache")
    return layer.backward(cache, grad_out)
