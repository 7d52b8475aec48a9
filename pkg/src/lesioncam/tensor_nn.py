"""Dense NCHW tensor ops with hand-written backward passes.

Every op is dtype-polymorphic: float32 arrays go through the training path,
float64 arrays give the double-precision replica used by gradient checks.
Forward functions return ``(output, ctx)``; the matching backward consumes
``ctx``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError

DTYPE = np.float32


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"spatial size {size} with kernel {kernel}, stride {stride}, "
            f"padding {padding} does not give a whole positive output size"
        )
    return span // stride + 1


@dataclass
class ConvContext:
    x_shape: tuple  # padded input shape
    cols: np.ndarray  # (N, C*k*k, Ho*Wo)
    kernels: np.ndarray
    stride: int
    padding: int
    out_hw: tuple


def _im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d_forward(x, kernels, bias, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernels`` (O,C,k,k)."""
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[1] != x.shape[1]:
        raise ShapeError(f"input shape {x.shape} incompatible with kernel shape {kernels.shape}")
    if kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernel must be square, got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    o, _, k, _ = kernels.shape
    ho = conv_output_size(x.shape[2], k, stride, padding)
    wo = conv_output_size(x.shape[3], k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(x, k, stride, ho, wo)
    out = np.matmul(kernels.reshape(o, -1), cols)
    out += bias[None, :, None]
    ctx = ConvContext(x.shape, cols, kernels, stride, padding, (ho, wo))
    return out.reshape(x.shape[0], o, ho, wo), ctx


def conv2d_backward(upstream, ctx: ConvContext | None, need_input_grad=True):
    """Return ``(grad_input, grad_kernels, grad_bias)``.

    ``grad_input`` is None when ``need_input_grad`` is False (first layer).
    """
    if ctx is None:
        raise UsageError("conv2d_backward called without a forward context")
    n, c, hp, wp = ctx.x_shape
    o, _, k, _ = ctx.kernels.shape
    ho, wo = ctx.out_hw
    if upstream.shape != (n, o, ho, wo):
        raise ShapeError(f"upstream shape {upstream.shape} != forward output {(n, o, ho, wo)}")
    g = upstream.reshape(n, o, ho * wo)
    grad_bias = g.sum(axis=(0, 2))
    grad_kernels = np.matmul(g, ctx.cols.transpose(0, 2, 1)).sum(axis=0).reshape(ctx.kernels.shape)
    if not need_input_grad:
        return None, grad_kernels, grad_bias
    dcols = np.matmul(ctx.kernels.reshape(o, -1).T, g).reshape(n, c, k, k, ho, wo)
    grad_padded = np.zeros(ctx.x_shape, dtype=upstream.dtype)
    s = ctx.stride
    for i in range(k):
        for j in range(k):
            grad_padded[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    p = ctx.padding
    grad_input = grad_padded[:, :, p:hp - p, p:wp - p] if p else grad_padded
    return np.ascontiguousarray(grad_input), grad_kernels, grad_bias


# ---------------------------------------------------------------- activations

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(upstream, mask):
    return upstream * mask


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    # window elements ordered (0,0),(0,1),(1,0),(1,1): argmax picks the first max in row-major order
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2x2_backward(upstream, ctx):
    (n, c, h, w), arg = ctx
    routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=upstream.dtype)
    np.put_along_axis(routed, arg[..., None], upstream[..., None], axis=-1)
    return routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def gap_forward(x):
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"gap needs a non-empty 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3)), x.shape


def gap_backward(upstream, shape):
    n, c, h, w = shape
    g = upstream / (h * w)
    return np.broadcast_to(g[:, :, None, None], shape).astype(upstream.dtype)


def dropout_forward(x, p, train, rng: np.random.Generator | None = None):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise UsageError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    if rng is None:
        raise UsageError("train-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * keep, keep


def dropout_backward(upstream, keep):
    return upstream if keep is None else upstream * keep


def fc_forward(x, weights):
    """Bias-free dense layer: (N,K) @ (K,C) -> (N,C)."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"input shape {x.shape} incompatible with weight shape {weights.shape}")
    return x @ weights, (x, weights)


def fc_backward(upstream, ctx):
    x, weights = ctx
    return upstream @ weights.T, x.T @ upstream


# ---------------------------------------------------------------- head / loss

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean negative log-likelihood over the batch and its gradient w.r.t. the logits.

    ``probs`` is (N,C) softmax output, ``labels`` an int array of length N.
    """
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    n, c = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise UsageError(f"class index out of range [0, {c})")
    picked = np.maximum(probs[np.arange(n), labels], 1e-12)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


# ---------------------------------------------------------------- optimizer

def sgd_step(params, learning_rate, momentum=0.0, weight_decay=0.0):
    """Momentum SGD with L2 decay folded into the velocity; zeroes grads afterwards."""
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        if weight_decay:
            p.velocity += weight_decay * p.value
        p.value -= learning_rate * p.velocity
        p.zero_grad()


# ---------------------------------------------------------------- layer objects

class Layer:
    kind = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0, rng=None, bias=True):
        rng = rng or np.random.default_rng(0)
        self.need_input_grad = True
        fan_in = in_channels * kernel_size * kernel_size
        self.kernels = Param(he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        # a bias-free conv keeps a fixed zero bias that is never trained or saved
        self.bias = Param(np.zeros(out_channels, dtype=DTYPE))
        self.has_bias = bias
        self.stride, self.padding = stride, padding
        self._ctx = None

    def params(self):
        return [self.kernels, self.bias] if self.has_bias else [self.kernels]

    def forward(self, x, train=False):
        out, self._ctx = conv2d_forward(x, self.kernels.value, self.bias.value, self.stride, self.padding)
        return out

    def backward(self, upstream):
        gx, gk, gb = conv2d_backward(upstream, self._ctx, self.need_input_grad)
        self.kernels.grad += gk
        if self.has_bias:
            self.bias.grad += gb
        self._ctx = None
        return gx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, upstream):
        return relu_backward(upstream, self._mask)


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x, train=False):
        out, self._ctx = maxpool2x2_forward(x)
        return out

    def backward(self, upstream):
        return maxpool2x2_backward(upstream, self._ctx)


class GlobalAvgPool(Layer):
    kind = "gap"

    def forward(self, x, train=False):
        out, self._shape = gap_forward(x)
        return out

    def backward(self, upstream):
        return gap_backward(upstream, self._shape)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5, rng=None):
        if not 0 <= p < 1:
            raise UsageError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x, train=False):
        out, self._keep = dropout_forward(x, self.p, train, self.rng)
        return out

    def backward(self, upstream):
        return dropout_backward(upstream, self._keep)


class Linear(Layer):
    """Bias-free fully connected layer with weights shaped (in_features, num_classes)."""

    kind = "fc"

    def __init__(self, in_features, out_features, rng=None):
        rng = rng or np.random.default_rng(0)
        self.weights = Param(he_uniform(rng, (in_features, out_features), in_features))

    def params(self):
        return [self.weights]

    def forward(self, x, train=False):
        out, self._ctx = fc_forward(x, self.weights.value)
        return out

    def backward(self, upstream):
        gx, gw = fc_backward(upstream, self._ctx)
        self.weights.grad += gw
        return gx
