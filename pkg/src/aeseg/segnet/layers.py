"""NHWC layer primitives with explicit forward/backward pairs.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
consumes the upstream gradient and that cache.
"""

import numpy as np

NORM_EPS = 1e-5


def _tap_weights(w):
    # (3, 3, C, K) -> (C, 9K), columns ordered by tap (dy, dx) then K
    c, k = w.shape[2], w.shape[3]
    return w.transpose(2, 0, 1, 3).reshape(c, 9 * k)


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution. x: (N, H, W, C), w: (3, 3, C, K), b: (K,).

    One GEMM maps every padded pixel through all nine taps; the output then
    gathers tap (dy, dx) from the pixel offset by (dy, dx).
    """
    n, h, wd, c = x.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = (xp.reshape(-1, c) @ _tap_weights(w)).reshape(n, h + 2, wd + 2, 3, 3, k)
    out = np.empty((n, h, wd, k), dtype=taps.dtype)
    out[...] = b
    for dy in range(3):
        for dx in range(3):
            out += taps[:, dy : dy + h, dx : dx + wd, dy, dx, :]
    return out, (xp, w)


def conv3x3_backward(dout, cache, need_dx=True):
    xp, w = cache
    n, hp, wp, c = xp.shape
    h, wd = hp - 2, wp - 2
    k = w.shape[-1]
    db = dout.sum(axis=(0, 1, 2))
    spread = np.zeros((n, hp, wp, 3, 3, k), dtype=dout.dtype)
    for dy in range(3):
        for dx in range(3):
            spread[:, dy : dy + h, dx : dx + wd, dy, dx, :] = dout
    spread = spread.reshape(-1, 9 * k)
    dw = (xp.reshape(-1, c).T @ spread).reshape(c, 3, 3, k).transpose(1, 2, 0, 3)
    if not need_dx:
        return None, dw, db
    dxp = (spread @ _tap_weights(w).T).reshape(n, hp, wp, c)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def conv1x1_forward(x, w, b):
    n, h, wd, c = x.shape
    k = w.shape[-1]
    out = x.reshape(-1, c) @ w.reshape(c, k) + b
    return out.reshape(n, h, wd, k), (x, w)


def conv1x1_backward(dout, cache):
    x, w = cache
    c, k = x.shape[-1], w.shape[-1]
    d2 = dout.reshape(-1, k)
    x2 = x.reshape(-1, c)
    dw = (x2.T @ d2).reshape(w.shape)
    dx = (d2 @ w.reshape(c, k).T).reshape(x.shape)
    return dx, dw, d2.sum(axis=0)


def norm_forward(x, scale, shift, running_mean, running_var, use_batch_stats):
    """Per-channel normalisation over N, H, W.

    With batch statistics the returned ``stats`` holds the (mean, unbiased
    var) pair the caller folds into its running averages.
    """
    if use_batch_stats:
        axes = (0, 1, 2)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[-1]
        stats = (mean, var * count / max(count - 1, 1))
    else:
        mean, var, stats = running_mean, running_var, None
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mean) * inv_std
    out = xhat * scale + shift
    return out, (xhat, inv_std, scale, use_batch_stats), stats


def norm_backward(dout, cache):
    xhat, inv_std, scale, use_batch_stats = cache
    axes = (0, 1, 2)
    dscale = (dout * xhat).sum(axis=axes)
    dshift = dout.sum(axis=axes)
    dxhat = dout * scale
    if not use_batch_stats:
        return dxhat * inv_std, dscale, dshift
    count = xhat.size // xhat.shape[-1]
    dx = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx, dscale, dshift


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def maxpool2_forward(x):
    n, h, w, c = x.shape
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = windows.reshape(n, h // 2, w // 2, c, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    (n, h, w, c), idx = cache
    dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(n, h, w, c)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2), None


def upsample2_backward(dout, cache=None):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def spatial_dropout_forward(x, rate, rngs):
    """Zero whole channels per sample, scaling survivors by 1/(1-rate).

    ``rngs`` is one Generator per sample, or a single Generator for the batch.
    """
    n, c = x.shape[0], x.shape[-1]
    if isinstance(rngs, np.random.Generator):
        u = rngs.random((n, c))
    else:
        u = np.stack([g.random(c) for g in rngs])
    mask = ((u >= rate) / (1.0 - rate)).astype(x.dtype).reshape(n, 1, 1, c)
    return x * mask, mask


def spatial_dropout_backward(dout, mask):
    return dout * mask
