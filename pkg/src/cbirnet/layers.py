"""Forward and backward kernels for every layer type the network uses.

All arithmetic is 64-bit. Each layer owns its parameters and gradient
accumulators; backward passes accumulate into the grads (they never
overwrite), so callers must zero_grads() between SGD steps. Forward passes
with train=False touch no layer state and are safe to run concurrently on
a frozen network.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InternalError

DTYPE = np.float64


def _conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Layer:
    """Base class: parameterless layers inherit the no-op grad handling."""

    def parameters(self):
        """Pairs of (value, gradient) arrays, possibly empty."""
        return []

    def zero_grads(self):
        for _, grad in self.parameters():
            grad.fill(0.0)

    def output_shape(self, input_shape):
        raise NotImplementedError

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


class Conv2d(Layer):
    """2-D cross-correlation over a (channels, height, width) input.

    Output spatial size follows the floor formula
    out = (in + 2*padding - kernel) // stride + 1. The kernel is applied
    unflipped (cross-correlation, the usual CNN convention).
    """

    def __init__(self, in_channels, out_channels, kernel_h, kernel_w,
                 stride=1, padding=0):
        if stride < 1:
            raise ConfigurationError(f"stride must be >= 1, got {stride}")
        if padding < 0:
            raise ConfigurationError(f"padding must be >= 0, got {padding}")
        if min(in_channels, out_channels, kernel_h, kernel_w) < 1:
            raise ConfigurationError("channel and kernel sizes must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_h = kernel_h
        self.kernel_w = kernel_w
        self.stride = stride
        self.padding = padding
        self.weights = np.zeros(
            (out_channels, in_channels, kernel_h, kernel_w), dtype=DTYPE)
        self.biases = np.zeros(out_channels, dtype=DTYPE)
        self.weight_grads = np.zeros_like(self.weights)
        self.bias_grads = np.zeros_like(self.biases)
        self._cols = None
        self._in_shape = None

    def parameters(self):
        return [(self.weights, self.weight_grads),
                (self.biases, self.bias_grads)]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ConfigurationError(
                f"input has {c} channels, kernel expects {self.in_channels}")
        if self.kernel_h > h + 2 * self.padding or self.kernel_w > w + 2 * self.padding:
            raise ConfigurationError(
                f"kernel {self.kernel_h}x{self.kernel_w} exceeds padded "
                f"input {h + 2 * self.padding}x{w + 2 * self.padding}")
        oh = _conv_extent(h, self.kernel_h, self.stride, self.padding)
        ow = _conv_extent(w, self.kernel_w, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ConfigurationError("convolution output would be empty")
        return (self.out_channels, oh, ow)

    def _im2col(self, x):
        """Patch matrix of shape (in_channels*kh*kw, out_h*out_w)."""
        p, s = self.padding, self.stride
        if p > 0:
            x = np.pad(x, ((0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (self.kernel_h, self.kernel_w),
                                  axis=(1, 2))[:, ::s, ::s]
        c, oh, ow = win.shape[:3]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(
            c * self.kernel_h * self.kernel_w, oh * ow)
        return np.ascontiguousarray(cols), (oh, ow)

    def forward(self, x, train=False):
        _, oh, ow = self.output_shape(x.shape)
        cols, _ = self._im2col(x)
        w2d = self.weights.reshape(self.out_channels, -1)
        out = (w2d @ cols + self.biases[:, None]).reshape(
            self.out_channels, oh, ow)
        if train:
            self._cols = cols
            self._in_shape = x.shape
        return out

    def backward(self, grad_out):
        if self._cols is None:
            raise InternalError("backward called before a train-mode forward")
        c, h, w = self._in_shape
        kh, kw, s, p = self.kernel_h, self.kernel_w, self.stride, self.padding
        oc, oh, ow = grad_out.shape
        if (oc, oh, ow) != self.output_shape(self._in_shape):
            raise InternalError(
                f"upstream gradient shape {grad_out.shape} does not match "
                f"forward output {self.output_shape(self._in_shape)}")
        g2d = grad_out.reshape(oc, oh * ow)
        self.bias_grads += g2d.sum(axis=1)
        self.weight_grads += (g2d @ self._cols.T).reshape(self.weights.shape)
        dcols = self.weights.reshape(oc, -1).T @ g2d
        dwin = dcols.reshape(c, kh, kw, oh, ow)
        dxp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + s * oh:s, j:j + s * ow:s] += dwin[:, i, j]
        if p > 0:
            return dxp[:, p:-p, p:-p].copy()
        return dxp


class MaxPool2d(Layer):
    """Window-maximum downsampling; windows may overlap when stride < window.

    The forward pass records the flat input index of each window's winner
    (ties break toward the row-major first position); backward routes each
    upstream element to that index, accumulating where windows overlap.
    """

    def __init__(self, window, stride):
        if window < 1 or stride < 1:
            raise ConfigurationError("window and stride must be >= 1")
        self.window = window
        self.stride = stride
        self._argmax = None
        self._in_shape = None

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if self.window > h or self.window > w:
            raise ConfigurationError(
                f"pool window {self.window} exceeds input {h}x{w}")
        oh = (h - self.window) // self.stride + 1
        ow = (w - self.window) // self.stride + 1
        return (c, oh, ow)

    def forward(self, x, train=False):
        c, h, w = x.shape
        _, oh, ow = self.output_shape(x.shape)
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = win.reshape(c, oh, ow, k * k)
        arg = flat.argmax(axis=3)
        out = np.take_along_axis(flat, arg[..., None], axis=3)[..., 0]
        if train:
            rows = (np.arange(oh) * s)[None, :, None] + arg // k
            cols = (np.arange(ow) * s)[None, None, :] + arg % k
            chan = np.arange(c)[:, None, None]
            self._argmax = (chan * h + rows) * w + cols
            self._in_shape = x.shape
        return out

    def backward(self, grad_out):
        if self._argmax is None:
            raise InternalError("backward called before a train-mode forward")
        if grad_out.shape != self._argmax.shape:
            raise InternalError(
                f"upstream gradient shape {grad_out.shape} does not match "
                f"pooled output {self._argmax.shape}")
        dx = np.zeros(int(np.prod(self._in_shape)), dtype=DTYPE)
        np.add.at(dx, self._argmax.ravel(), grad_out.ravel())
        return dx.reshape(self._in_shape)


class ReLU(Layer):
    """Elementwise max(0, x)."""

    def __init__(self):
        self._mask = None

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise InternalError("backward called before a train-mode forward")
        return grad_out * self._mask


class FullyConnected(Layer):
    """Affine map y = W x + b on a flattened input vector."""

    def __init__(self, in_features, out_features):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("feature counts must be >= 1")
        self.in_features = in_features
        self.out_features = out_features
        self.weights = np.zeros((out_features, in_features), dtype=DTYPE)
        self.biases = np.zeros(out_features, dtype=DTYPE)
        self.weight_grads = np.zeros_like(self.weights)
        self.bias_grads = np.zeros_like(self.biases)
        self._x = None
        self._in_shape = None

    def parameters(self):
        return [(self.weights, self.weight_grads),
                (self.biases, self.bias_grads)]

    def output_shape(self, input_shape):
        n = int(np.prod(input_shape))
        if n != self.in_features:
            raise ConfigurationError(
                f"input of {n} values does not match weight matrix "
                f"expecting {self.in_features}")
        return (self.out_features,)

    def forward(self, x, train=False):
        self.output_shape(x.shape)
        flat = x.reshape(-1)
        if train:
            self._x = flat
            self._in_shape = x.shape
        return self.weights @ flat + self.biases

    def backward(self, grad_out):
        if self._x is None:
            raise InternalError("backward called before a train-mode forward")
        self.weight_grads += np.outer(grad_out, self._x)
        self.bias_grads += grad_out
        return (self.weights.T @ grad_out).reshape(self._in_shape)


class Dropout(Layer):
    """Random zeroing in training, expectation-balancing scale at eval time.

    Training keeps each element with probability keep_prob and passes
    survivors through unscaled; eval multiplies everything by keep_prob so
    expected activations match between the two phases. Parameters are never
    modified by masking: a fresh mask is drawn per training forward.
    """

    def __init__(self, keep_prob, rng=None):
        if not 0.0 < keep_prob <= 1.0:
            raise ConfigurationError(
                f"keep_prob must be in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def output_shape(self, input_shape):
        return input_shape

    def forward(self, x, train=False):
        if not train:
            return x * self.keep_prob
        if self.keep_prob == 1.0:
            # No-op; skip the draw so the rng stream is untouched.
            self._mask = np.ones(x.shape, dtype=bool)
            return x.copy()
        self._mask = self.rng.random(x.shape) < self.keep_prob
        return x * self._mask

    def backward(self, grad_out):
        if self._mask is None:
            raise InternalError("backward called before a train-mode forward")
        return grad_out * self._mask


class LogSoftmax(Layer):
    """Log of the softmax over a vector, computed with max subtraction."""

    def __init__(self, num_classes):
        if num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        self.num_classes = num_classes
        self._probs = None

    def output_shape(self, input_shape):
        n = int(np.prod(input_shape))
        if n != self.num_classes:
            raise ConfigurationError(
                f"expected a vector of {self.num_classes} logits, got {n}")
        return (self.num_classes,)

    def forward(self, x, train=False):
        self.output_shape(x.shape)
        flat = x.reshape(-1)
        shifted = flat - flat.max()
        out = shifted - np.log(np.exp(shifted).sum())
        if train:
            self._probs = np.exp(out)
        return out

    def backward(self, grad_out):
        if self._probs is None:
            raise InternalError("backward called before a train-mode forward")
        return grad_out - self._probs * grad_out.sum()
