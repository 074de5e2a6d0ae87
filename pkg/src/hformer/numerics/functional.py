"""Neural-network primitives with hand-written backward passes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import ops
from .tensor import Tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    if np.isnan(x.data).any():
        raise ValueError("softmax: NaN in input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (channels-last), then scale and shift."""
    n = x.shape[-1]
    if n == 0:
        raise ValueError("layer_norm: zero-length normalization axis")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (x,), bw, "gelu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias); weight is stored (in_features, out_features)."""
    y = ops.matmul(x, weight)
    return y if bias is None else ops.add(y, bias)


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="constant" if mode == "zeros" else "edge")


def _unpad_grad(gp: np.ndarray, p: int, h: int, w: int, mode: str) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "zeros":
        return np.ascontiguousarray(gp[:, :, p:p + h, p:p + w])
    rows = gp[:, :, p:p + h, :].copy()
    rows[:, :, 0] += gp[:, :, :p].sum(axis=2)
    rows[:, :, -1] += gp[:, :, p + h:].sum(axis=2)
    out = rows[..., p:p + w].copy()
    out[..., 0] += rows[..., :p].sum(axis=-1)
    out[..., -1] += rows[..., p + w:].sum(axis=-1)
    return out


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, pad_mode: str = "zeros") -> Tensor:
    """2-D cross-correlation on NCHW input with OIhw weights.

    `pad_mode` is "zeros" or "edge" (replicate border pixels).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError("conv2d kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = _pad(x.data, padding, pad_mode)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gp = np.zeros_like(xp)
            he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + he:stride, j:j + we:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = _unpad_grad(gp, padding, h, wd, pad_mode)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return make_result(out, parents, bw, "conv2d")


def _resize_axis(n_in: int, n_out: int):
    # half-pixel centers (align_corners off), clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    i0, i1, f = _resize_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes, half-pixel convention.

    Interpolation is written as a + f * (b - a), so constant inputs stay
    exactly constant.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_result(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    r0, r1, fr = _resize_axis(h, out_h)
    c0, c1, fc = _resize_axis(w, out_w)
    d = x.data
    fr = fr.astype(d.dtype)[:, None]
    fc = fc.astype(d.dtype)
    a = d[..., r0, :]
    t = a + fr * (d[..., r1, :] - a)
    b = t[..., c0]
    out = b + fc * (t[..., c1] - b)

    def bw(g):
        mh = _resize_matrix(h, out_h).astype(g.dtype)
        mw = _resize_matrix(w, out_w).astype(g.dtype)
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "bilinear_resize")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean pixel cross-entropy; class axis is 1 (N, K, ...)."""
    k = logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = np.moveaxis(logits.data, 1, -1).reshape(-1, k)
    lab = labels.reshape(-1).astype(np.int64)
    keep = np.ones(lab.shape, dtype=bool) if ignore_index is None else lab != ignore_index
    bad = keep & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ValueError(f"cross_entropy: label out of range [0, {k - 1}]")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: no contributing pixels")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    idx = np.where(keep, lab, 0)
    picked = z[np.arange(z.shape[0]), idx]
    loss = np.where(keep, lse - picked, 0.0).sum() / count

    def bw(g):
        p = e / s
        p[np.arange(z.shape[0]), idx] -= 1.0
        p *= (keep[:, None] * (g / count))
        p = p.reshape(logits.data.shape[:1] + logits.data.shape[2:] + (k,))
        return (np.ascontiguousarray(np.moveaxis(p, -1, 1)).astype(logits.dtype, copy=False),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")
