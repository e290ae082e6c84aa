"""Differentiable primitives for small convolutional and recurrent networks.

All image tensors are NCHW. Convolution weights are ``(out, in, k, k)``;
transposed-convolution weights are ``(in, out, k, k)`` so that a transposed
convolution with weight ``w`` is the adjoint of a convolution with the same
``w``.
"""

from __future__ import annotations

import numpy as np

from ssplab.autodiff.tensor import Tensor


# ---------------------------------------------------------------------------
# raw numpy kernels


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), value, dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class _ShiftedGrid:
    """Window offsets of a padded NCHW array as contiguous shifted views.

    ``view(i, j)[n, c, r, s] == xp[n, c, r + i, s + j]`` wherever the window
    fits inside the plane; other grid cells hold spill-over values that the
    callers crop away. Shifting the flattened buffer keeps every inner loop
    contiguous, which is much faster than strided 4-D slicing in numpy.
    """

    def __init__(self, xp: np.ndarray, k: int, fill: float = 0.0):
        self.shape = xp.shape
        self.size = xp.size
        self.wp = xp.shape[3]
        self.flat = np.empty(self.size + (k - 1) * (self.wp + 1), dtype=xp.dtype)
        self.flat[: self.size] = xp.ravel()
        self.flat[self.size :] = fill

    def view(self, i: int, j: int) -> np.ndarray:
        off = i * self.wp + j
        return self.flat[off : off + self.size].reshape(self.shape)


def _crop(full: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    return np.ascontiguousarray(full[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride])


def _embed(g: np.ndarray, shape: tuple, stride: int) -> np.ndarray:
    """Inverse of :func:`_crop`: zeros everywhere except the kept grid cells."""
    full = np.zeros(shape, dtype=g.dtype)
    ho, wo = g.shape[2], g.shape[3]
    full[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride] = g
    return full


def _scatter_windows(k: int, shape: tuple, contrib, dtype) -> np.ndarray:
    """Adjoint of reading the shifted views: accumulate ``contrib(i, j)`` back at each offset."""
    size = int(np.prod(shape))
    wp = shape[3]
    dflat = np.zeros(size + (k - 1) * (wp + 1), dtype=dtype)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            dflat[off : off + size].reshape(shape)[...] += contrib(i, j)
    return dflat[:size].reshape(shape)


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    """``(N, C*k*k, Hp*Wp)`` patch matrix over the full padded grid."""
    n, c, hp, wp = xp.shape
    grid = _ShiftedGrid(xp, k)
    cols = np.empty((n, c, k * k, hp * wp), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = grid.view(i, j).reshape(n, c, hp * wp)
    return cols.reshape(n, c * k * k, hp * wp)


_COLS_BUDGET = 2 << 20  # bytes of patch matrix per block; keeps im2col in cache


def _batch_blocks(n: int, bytes_per_item: int, budget: int = _COLS_BUDGET):
    step = max(1, budget // max(1, bytes_per_item))
    return [slice(s, min(n, s + step)) for s in range(0, n, step)]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, _, h, wd = x.shape
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    xp = _pad(x, pad)
    hp, wp = xp.shape[2], xp.shape[3]
    p = hp * wp
    if k == 1:
        full = np.matmul(w.reshape(o, c), xp.reshape(n, c, p))
    else:
        wm = w.reshape(o, c * k * k)
        full = np.empty((n, o, p), dtype=np.result_type(x, w))
        for blk in _batch_blocks(n, c * k * k * p * x.itemsize):
            np.matmul(wm, _im2col(xp[blk], k), out=full[blk])
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    return _crop(full.reshape(n, o, hp, wp), ho, wo, stride)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int, in_hw: tuple) -> np.ndarray:
    """Gradient of ``conv(x, w)`` w.r.t. ``x`` given output gradient ``g``."""
    n, o = g.shape[0], g.shape[1]
    c, k = w.shape[1], w.shape[2]
    h, wd = in_hw
    if stride == 1 and k - 1 - pad >= 0 and (g.shape[2], g.shape[3]) == (h + 2 * pad - k + 1, wd + 2 * pad - k + 1):
        # stride-1 adjoint is a full correlation with the flipped, transposed kernel
        flipped = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return _conv_forward(g, flipped, 1, k - 1 - pad)
    shape = (n, c, h + 2 * pad, wd + 2 * pad)
    p = shape[2] * shape[3]
    gfull = _embed(g, (n, o) + shape[2:], stride).reshape(n, o, p)
    dcols = np.matmul(w.reshape(o, c * k * k).T, gfull).reshape(n, c, k * k, p)
    dxp = _scatter_windows(k, shape, lambda i, j: dcols[:, :, i * k + j].reshape(shape), g.dtype)
    return dxp[:, :, pad : pad + h, pad : pad + wd]


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    n, o = g.shape[0], g.shape[1]
    c = x.shape[1]
    xp = _pad(x, pad)
    p = xp.shape[2] * xp.shape[3]
    gfull = _embed(g, (n, o) + xp.shape[2:], stride).reshape(n, o, p)
    if k == 1:
        return np.tensordot(gfull, xp.reshape(n, c, p), axes=([0, 2], [0, 2])).reshape(o, c, 1, 1)
    gw = np.zeros((o, c * k * k), dtype=g.dtype)
    for blk in _batch_blocks(n, c * k * k * p * x.itemsize):
        gw += np.tensordot(gfull[blk], _im2col(xp[blk], k), axes=([0, 2], [0, 2]))
    return gw.reshape(o, c, k, k)


def _depthwise_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    ho, wo = conv_output_size(x.shape[2], k, stride, pad), conv_output_size(x.shape[3], k, stride, pad)
    xp = _pad(x, pad)
    acc = np.empty(xp.shape, dtype=x.dtype)
    for blk in _batch_blocks(len(x), xp[0].nbytes, budget=256 << 10):
        grid = _ShiftedGrid(xp[blk], k)
        part = acc[blk]
        part[...] = 0
        tmp = np.empty_like(part)
        for i in range(k):
            for j in range(k):
                np.multiply(grid.view(i, j), w[:, 0, i, j][:, None, None], out=tmp)
                part += tmp
    return _crop(acc, ho, wo, stride)


def _pool_scatter(g_cols_fn, shape, k, stride, pad, out_hw, dtype):
    """Route per-offset output gradients ``g_cols_fn(i, j)`` (full padded grid) back to the input."""
    n, c, h, wd = shape
    dxp = _scatter_windows(k, (n, c, h + 2 * pad, wd + 2 * pad), g_cols_fn, dtype)
    return dxp[:, :, pad : pad + h, pad : pad + wd]


# ---------------------------------------------------------------------------
# differentiable ops


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    out = x @ weight
    return out + bias if bias is not None else out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {xd.shape}, w {wd.shape}")
    k = wd.shape[2]
    out = _conv_forward(xd, wd, stride, padding)

    def back(g):
        return (
            _conv_input_grad(g, wd, stride, padding, xd.shape[2:]) if x.requires_grad else None,
            _conv_weight_grad(g, xd, k, stride, padding) if weight.requires_grad else None,
        )

    return Tensor._result(out, (x, weight), back, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is ``(in, out, k, k)``."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"conv_transpose2d shape mismatch: x {xd.shape}, w {wd.shape}")
    if not 0 <= output_padding < stride:
        raise ValueError("output_padding must lie in [0, stride)")
    k = wd.shape[2]
    h_out = (xd.shape[2] - 1) * stride - 2 * padding + k + output_padding
    w_out = (xd.shape[3] - 1) * stride - 2 * padding + k + output_padding
    out = _conv_input_grad(xd, wd, stride, padding, (h_out, w_out))
    out = np.ascontiguousarray(out)

    def back(g):
        return (
            _conv_forward(g, wd, stride, padding)[:, :, : xd.shape[2], : xd.shape[3]] if x.requires_grad else None,
            _conv_weight_grad(xd, g, k, stride, padding) if weight.requires_grad else None,
        )

    return Tensor._result(out, (x, weight), back, "conv_transpose2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; ``weight`` is ``(C, 1, k, k)``."""
    xd, wd = x.data, weight.data
    if wd.shape[1] != 1 or wd.shape[0] != xd.shape[1]:
        raise ValueError(f"depthwise weight {wd.shape} incompatible with input {xd.shape}")
    k = wd.shape[2]
    out = _depthwise_forward(xd, wd, stride, padding)

    def back(g):
        gx = gw = None
        padded = (xd.shape[0], xd.shape[1], xd.shape[2] + 2 * padding, xd.shape[3] + 2 * padding)
        gfull = _embed(g, padded, stride)
        if x.requires_grad:
            gx = _pool_scatter(
                lambda i, j: gfull * wd[:, 0, i, j][:, None, None], xd.shape, k, stride, padding, None, g.dtype
            )
        if weight.requires_grad:
            grid = _ShiftedGrid(_pad(xd, padding), k)
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gfull, grid.view(i, j))
        return gx, gw

    return Tensor._result(out, (x, weight), back, "depthwise_conv2d")


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling; on ties the first window position (row-major) takes the gradient."""
    xd = x.data
    ho, wo = conv_output_size(xd.shape[2], k, stride, padding), conv_output_size(xd.shape[3], k, stride, padding)
    grid = _ShiftedGrid(_pad(xd, padding, value=-np.inf), k, fill=-np.inf)
    full = grid.view(0, 0).copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(full, grid.view(i, j), out=full)
    out = _crop(full, ho, wo, stride)

    def back(g):
        best = np.full(grid.shape, -np.inf, dtype=xd.dtype)
        arg = np.zeros(grid.shape, dtype=np.int16)
        for i in range(k):
            for j in range(k):
                v = grid.view(i, j)
                better = v > best
                np.copyto(best, v, where=better)
                arg[better] = i * k + j
        gfull = _embed(g, grid.shape, stride)
        return (_pool_scatter(lambda i, j: gfull * (arg == i * k + j), xd.shape, k, stride, padding, None, g.dtype),)

    return Tensor._result(out, (x,), back, "max_pool2d")


def _window_sum_full(xp: np.ndarray, k: int) -> np.ndarray:
    grid = _ShiftedGrid(xp, k)
    total = grid.view(0, 0).copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                total += grid.view(i, j)
    return total


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded cells from each window's count."""
    xd = x.data
    n, c, h, wd = xd.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    counts = _crop(_window_sum_full(_pad(np.ones((1, 1, h, wd), dtype=xd.dtype), padding), k), ho, wo, stride)
    out = _crop(_window_sum_full(_pad(xd, padding), k), ho, wo, stride) / counts

    def back(g):
        gfull = _embed(g / counts, (n, c, h + 2 * padding, wd + 2 * padding), stride)
        return (_pool_scatter(lambda i, j: gfull, xd.shape, k, stride, padding, None, g.dtype),)

    return Tensor._result(out, (x,), back, "avg_pool2d")


def _pair_matrix(w: int, dtype) -> np.ndarray:
    m = np.zeros((w, w // 2), dtype=dtype)
    m[np.arange(w), np.arange(w) // 2] = 0.25
    return m


def downsample2x(x: Tensor) -> Tensor:
    """2x2 average pool with stride 2 (H and W must be even)."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"cannot halve odd spatial dims {h}x{w}")
    xd = x.data
    pairs = xd.reshape(n * c * h // 2, 2, w)
    rows = pairs[:, 0, :] + pairs[:, 1, :]
    cols = _pair_matrix(w, xd.dtype)
    out = (rows @ cols).reshape(n, c, h // 2, w // 2)

    def back(g):
        gr = g.reshape(-1, w // 2) @ cols.T.astype(g.dtype)
        return (np.repeat(gr[:, None, :], 2, axis=1).reshape(x.shape),)

    return Tensor._result(out, (x,), back, "downsample2x")


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def dropout(
    x: Tensor,
    p: float,
    training: bool = True,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``.

    Passing ``mask`` freezes the random pattern (used for gradient checks).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    if not training or p == 0.0:
        return x
    if p == 1.0:
        return x * 0.0
    if mask is None:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng or a fixed mask")
        mask = rng.random(x.shape) >= p
    scale = (np.asarray(mask, dtype=x.dtype) / (1.0 - p)).astype(x.dtype)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W) for NCHW or (N,) for NC input.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running buffers normalise the input.
    """
    xd = x.data
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    bshape = (1, -1, 1, 1) if xd.ndim == 4 else (1, -1)
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if training:
        m = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes, keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        if running_mean is not None:
            unbiased = var.reshape(-1) * (m / max(m - 1, 1))
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def back(g):
            dxhat = g * g_
            gx = inv / m * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        if running_mean is None:
            raise ValueError("inference-mode batch norm needs running statistics")
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(xd.dtype)
        xhat = (xd - mu) * inv

        def back(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (xhat * g_ + b_).astype(xd.dtype, copy=False)
    return Tensor._result(out, (x, gamma, beta), back, "batch_norm")


def lstm_cell(
    x: Tensor, h: Tensor, c: Tensor, w_input: Tensor, w_hidden: Tensor, bias: Tensor
) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output)."""
    hidden = h.shape[1]
    gates = x @ w_input + h @ w_hidden + bias
    i = gates[:, :hidden].sigmoid()
    f = gates[:, hidden : 2 * hidden].sigmoid()
    g = gates[:, 2 * hidden : 3 * hidden].tanh()
    o = gates[:, 3 * hidden :].sigmoid()
    c_next = f * c + i * g
    h_next = o * c_next.tanh()
    return h_next, c_next


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    shifted = zd - zd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._result(out, (z,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    zd = z.data
    e = np.exp(zd - zd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._result(
        out, (z,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax"
    )


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(n), labels]
    return -picked.mean()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def log_sigmoid(x: Tensor) -> Tensor:
    return -((-x).softplus())


__all__ = [
    "avg_pool2d",
    "batch_norm",
    "conv2d",
    "conv_output_size",
    "conv_transpose2d",
    "cross_entropy",
    "depthwise_conv2d",
    "downsample2x",
    "dropout",
    "global_avg_pool",
    "linear",
    "log_sigmoid",
    "log_softmax",
    "lstm_cell",
    "max_pool2d",
    "separable_conv2d",
    "sigmoid",
    "softmax",
]
