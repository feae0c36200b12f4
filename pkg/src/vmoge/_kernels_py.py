"""Pure-numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels`` provides compiled
equivalents with identical signatures.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "python"


def conv_out_len(T, k, s):
    return (T - k) // s + 1


def conv1d_forward(x, w, b, stride):
    """Strided single-input-channel convolution.

    x: (M, T), w: (D, k), b: (D,)  ->  (M, L, D)
    """
    k = w.shape[1]
    L = conv_out_len(x.shape[1], k, stride)
    win = sliding_window_view(x, k, axis=1)[:, : (L - 1) * stride + 1 : stride]
    out = win @ w.T
    out += b
    return out


def conv1d_backward(g, x, w, stride, need_x=True):
    M, T = x.shape
    D, k = w.shape
    L = g.shape[1]
    win = sliding_window_view(x, k, axis=1)[:, : (L - 1) * stride + 1 : stride]
    g2 = g.reshape(-1, D)
    gw = g2.T @ win.reshape(-1, k)
    gb = g2.sum(axis=0)
    gx = None
    if need_x:
        gwin = g @ w  # (M, L, k)
        gx = np.zeros_like(x)
        stop = (L - 1) * stride + 1
        for j in range(k):
            gx[:, j : j + stop : stride] += gwin[:, :, j]
    return gx, gw, gb


def maxpool2_forward(x):
    """Non-overlapping max pool of factor 2 along axis 1 of (M, L, D)."""
    M, L, D = x.shape
    L2 = L // 2
    xr = x[:, : 2 * L2].reshape(M, L2, 2, D)
    idx = np.argmax(xr, axis=2)
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx.astype(np.int8)


def maxpool2_backward(g, idx, L):
    M, L2, D = g.shape
    gx = np.zeros((M, L, D))
    gr = gx[:, : 2 * L2].reshape(M, L2, 2, D)
    np.put_along_axis(gr, idx[:, :, None, :].astype(np.intp), g[:, :, None, :], axis=2)
    return gx


def layernorm_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layernorm_backward(g, xhat, rstd, gain):
    red = tuple(range(g.ndim - 1))
    ggain = (g * xhat).sum(axis=red)
    gbias = g.sum(axis=red)
    gx_hat = g * gain
    n = g.shape[-1]
    gx = rstd * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n
    )
    return gx, ggain, gbias


def _split_heads(x, H):
    M, L, D = x.shape
    return x.reshape(M, L, H, D // H).transpose(0, 2, 1, 3)


def _merge_heads(x):
    M, H, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(M, L, H * dh)


def mha_forward(q, k, v, heads):
    """Scaled dot-product attention per head.

    q, k, v: (M, L, D) -> context (M, L, D), weights (M, H, L, L).
    """
    dh = q.shape[2] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    s = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return _merge_heads(p @ vh), p


def mha_backward(g, q, k, v, p, heads):
    dh = q.shape[2] // heads
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    gh = _split_heads(g, heads)
    gp = gh @ vh.swapaxes(-1, -2)
    gv = p.swapaxes(-1, -2) @ gh
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * (1.0 / np.sqrt(dh))
    gq = gs @ kh
    gk = gs.swapaxes(-1, -2) @ qh
    return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)
