"""Differentiable neural-network primitives built on :mod:`musp.autograd`.

Image tensors are channels-last: ``(h, w, c)`` for one image or
``(N, h, w, c)`` for a batch.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import DTYPE, ShapeError, Tensor, ensure_tensor, make


class ConfigError(ValueError):
    """Raised for invalid hyperparameters or batch compositions."""


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, h, w, c) -> (N*h*w, 9*c) patches of the zero-padded input, ordered (ky, kx, c)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=DTYPE)
    xp[:, 1:-1, 1:-1, :] = x
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, h, w, c, 3, 3)
    return np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1, stride 1 (output keeps h, w)."""
    x, kernel = ensure_tensor(x), ensure_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3xCinxCout, got {kernel.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d: input must be (h, w, c) or (N, h, w, c), got {x.shape}")
    n, h, w, cin = xd.shape
    if cin != kernel.shape[2]:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {kernel.shape[2]}"
        )
    cout = kernel.shape[3]
    if bias is not None and ensure_tensor(bias).shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {ensure_tensor(bias).shape}")
    cols = _im2col(xd)
    wmat = kernel.data.reshape(9 * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += ensure_tensor(bias).data
    out = out.reshape(n, h, w, cout)
    if single:
        out = out[0]

    def grad_fn(g):
        g2 = g.reshape(n * h * w, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient: full correlation of g with the flipped, channel-transposed kernel
            flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
            gx = (_im2col(g2.reshape(n, h, w, cout)) @ flipped).reshape(n, h, w, cin)
            if single:
                gx = gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(np.ones(g2.shape[0], dtype=DTYPE) @ g2)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, ensure_tensor(bias))
    return make(out, parents, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight shaped (r_in, r_out)."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input length {x.shape[-1]} does not match weight rows {weight.shape[0]}"
        )
    out = x @ weight
    if bias is not None:
        bias = ensure_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return make(out, (x,), lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make(out, (x,), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g * 0.5 / out,))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode the running buffers are updated in place (EMA with the
    unbiased batch variance); in inference mode they are used instead of batch
    statistics.
    """
    x = ensure_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: parameters must have shape ({c},)")
    x2 = x.data.reshape(-1, c)
    count = x2.shape[0]
    ones = np.ones(count, dtype=DTYPE)
    if training:
        if x.ndim < 2 or count < 2:
            raise ConfigError("batch_norm: training mode needs at least 2 samples per channel")
        mu = (ones @ x2) / count
        xc = x2 - mu
        var = np.einsum("ij,ij->j", xc, xc) / count
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        xc = x2 - running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma.data * inv_std
    out = xc * scale
    out += beta.data
    out = out.reshape(x.shape)

    def grad_fn(g):
        g2 = g.reshape(-1, c)
        gb = ones @ g2
        gg = np.einsum("ij,ij->j", g2, xc) * inv_std
        gx = None
        if x.requires_grad:
            gx = g2 * scale
            if training:
                gx -= xc * (scale * inv_std * gg / count)
                gx -= scale * gb / count
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return make(out, (x, gamma, beta), grad_fn)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on (N, h, w, c); h and w must be even."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d: spatial extents must be even, got {h}x{w}")
    d = x.data
    out = d[:, 0::2, 0::2] + d[:, 1::2, 0::2]
    out += d[:, 0::2, 1::2]
    out += d[:, 1::2, 1::2]
    out *= 0.25

    def grad_fn(g):
        g4 = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (g4,)

    return make(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, h, w, c) -> (N, c), or (h, w, c) -> (c,)."""
    return x.mean(axis=(-3, -2))


def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of a (K, c) tensor.

    The subgradient at zero distance is taken as zero.
    """
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def grad_fn(g):
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, g / safe, 0.0)
        coef = coef + coef.T
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return make(dist, (x,), grad_fn)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)
