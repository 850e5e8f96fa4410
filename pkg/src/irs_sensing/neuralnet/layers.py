"""Array-level building blocks with hand-written backward passes.

All tensors use the channels-last layout ``(batch, height, width, channels)``
where height runs over the frequency points of a band and width over bands.
"""

import numpy as np


def _pad_same(x, k):
    p = k // 2
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def im2col(x, k=3, flip=False):
    """Unfold ``x`` into ``(B*H*W, k*k*C)`` patches for a stride-1 'same' conv.

    Column order is (kernel row, kernel col, channel); ``flip`` reverses the
    kernel-tap order, i.e. gathers ``x[p - offset]`` instead of ``x[p + offset]``.
    """
    B, H, W, C = x.shape
    xp = _pad_same(x, k)
    cols = np.empty((B, H, W, k * k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            t = i * k + j
            cols[:, :, :, k * k - 1 - t if flip else t, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, k * k * C)


def _shift_sum(y, k):
    """``out[p] = sum_t y[p + offset_t, t]`` with zero padding; ``y`` is ``(B, H, W, k*k, O)``."""
    B, H, W, _, O = y.shape
    p = k // 2
    out = np.zeros((B, H, W, O), dtype=y.dtype)
    for i in range(k):
        for j in range(k):
            di, dj = i - p, j - p
            h0, h1 = max(0, -di), H - max(0, di)
            w0, w1 = max(0, -dj), W - max(0, dj)
            out[:, h0:h1, w0:w1] += y[:, h0 + di:h1 + di, w0 + dj:w1 + dj, i * k + j]
    return out


def conv_forward(x, w):
    """'Same' stride-1 2-D convolution (cross-correlation), ``w`` is ``(out, in, k, k)``, no bias.

    Returns the output and a cache for :func:`conv_backward`. When the layer
    narrows the channel count, the kernel is applied before the spatial
    gather so the unfolded buffer is built on the smaller side.
    """
    B, H, W, C = x.shape
    O, _, k, _ = w.shape
    if C > O:
        x2 = x.reshape(-1, C)
        y = x2 @ w.transpose(1, 2, 3, 0).reshape(C, k * k * O)
        return _shift_sum(y.reshape(B, H, W, k * k, O), k), ("out", x2)
    cols = im2col(x, k)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(O, -1).T
    return out.reshape(B, H, W, O), ("in", cols)


def conv_backward(dout, cache, w, x_shape, need_dx=True):
    O, C, k, _ = w.shape
    kind, data = cache
    dx = None
    if kind == "out":
        dcols = im2col(dout, k, flip=True)
        wcat = w.transpose(1, 2, 3, 0).reshape(C, k * k * O)
        dw = (data.T @ dcols).reshape(C, k, k, O).transpose(3, 0, 1, 2)
        if need_dx:
            dx = (dcols @ wcat.T).reshape(x_shape)
        return dx, dw
    d = dout.reshape(-1, O)
    dw = (d.T @ data).reshape(O, k, k, C).transpose(0, 3, 1, 2)
    if need_dx:
        # input gradient of a 'same' conv is a 'same' conv of the output
        # gradient with the spatially flipped, transposed kernel
        dx, _ = conv_forward(dout, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return dx, dw


def block_diagonal(w):
    """Dense ``(G*F, G*Cg, k, k)`` kernel equivalent to grouped weights ``(G, F, Cg, k, k)``."""
    G, F, Cg, k, _ = w.shape
    full = np.zeros((G, F, G, Cg, k, k), dtype=w.dtype)
    idx = np.arange(G)
    full[idx, :, idx] = w
    return full.reshape(G * F, G * Cg, k, k)


def grouped_conv_forward(x, w):
    """Grouped 'same' convolution.

    ``w`` has shape ``(groups, out_per_group, in_per_group, k, k)``; group ``g``
    reads input channels ``g*in_per_group ...`` and writes output channels
    ``g*out_per_group ...``. Computed as one dense conv with a block-diagonal
    kernel, which is faster than per-group products at these sizes.
    """
    G, F, Cg, k, _ = w.shape
    if x.shape[-1] != G * Cg:
        raise ValueError(f"grouped conv expects {G * Cg} input channels, got {x.shape[-1]}")
    return conv_forward(x, block_diagonal(w))


def grouped_conv_backward(dout, cols, w, x_shape):
    G, F, Cg, k, _ = w.shape
    dx, dfull = conv_backward(dout, cols, block_diagonal(w), x_shape)
    idx = np.arange(G)
    dw = dfull.reshape(G, F, G, Cg, k, k)[idx, :, idx]
    return dx, dw


def _colsum(x2):
    # a matvec with ones beats ndarray.sum(axis=0) several-fold on tall arrays
    return np.ones(x2.shape[0], dtype=x2.dtype) @ x2


def batchnorm_forward(x, gamma, beta, mean, var, train, eps=1e-5):
    """Per-channel batchnorm over batch and spatial axes.

    Returns the output, the backward cache, and the (biased) statistics used.
    """
    x2 = x.reshape(-1, x.shape[-1])
    n = x2.shape[0]
    if train:
        mu = _colsum(x2) / n
        v = np.maximum(_colsum(x2 * x2) / n - mu * mu, 0)
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + eps)
    scale = gamma * inv
    out = x2 * scale
    out += beta - mu * scale
    return out.reshape(x.shape), (x2, mu, inv, gamma), mu, v


def batchnorm_backward(dout, cache):
    x2, mu, inv, gamma = cache
    d2 = dout.reshape(x2.shape)
    n = x2.shape[0]
    dbeta = _colsum(d2)
    dgamma = inv * (_colsum(d2 * x2) - mu * dbeta)
    # dx = gamma*inv * (d - dbeta/n - xhat*dgamma/n), expanded in terms of x
    a = gamma * inv
    b = -a * inv * dgamma / n
    c = -a * dbeta / n - b * mu
    dx = d2 * a
    dx += x2 * b
    dx += c
    return dx.reshape(dout.shape), dgamma, dbeta


def maxpool_forward(x, ph, pw):
    B, H, W, C = x.shape
    if H % ph or W % pw:
        raise ValueError(f"max pool {ph}x{pw} does not tile a {H}x{W} map")
    blocks = x.reshape(B, H // ph, ph, W // pw, pw, C)
    out = blocks.max(axis=(2, 4))
    # ties only occur between zeros from a preceding ReLU, whose gradient is
    # discarded anyway
    mask = blocks == out[:, :, None, :, None, :]
    return out, mask


def maxpool_backward(dout, mask, x_shape, ph, pw):
    return (mask * dout[:, :, None, :, None, :]).reshape(x_shape)


def avgpool_forward(x, ph, pw):
    B, H, W, C = x.shape
    if H % ph or W % pw:
        raise ValueError(f"avg pool {ph}x{pw} does not tile a {H}x{W} map")
    return x.reshape(B, H // ph, ph, W // pw, pw, C).mean(axis=(2, 4))


def avgpool_backward(dout, ph, pw):
    d = np.repeat(np.repeat(dout, ph, axis=1), pw, axis=2)
    return d / (ph * pw)


def sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
