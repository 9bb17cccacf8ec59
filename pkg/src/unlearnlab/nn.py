"""Layers composed from the autodiff primitives: linear, conv, attention.

Convolution is im2col + one matrix multiply.  The gather indices depend only
on geometry, so they are computed once per (batch, channels, size, kernel,
stride, padding) tuple and cached.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "linear",
    "conv2d",
    "attention",
    "sinusoidal_embedding",
    "normal_init",
    "MASK_NEG",
]

# Additive pre-softmax penalty for masked keys.  exp(x) underflows to exactly
# 0.0 for x < -745, so masked positions contribute nothing, bit for bit.
MASK_NEG = -1e9

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def linear(x, w, b=None) -> Tensor:
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def _im2col_indices(batch: int, cin: int, h: int, w: int, kh: int, kw: int,
                    stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    key = (batch, cin, h, w, kh, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    idx = _IM2COL_CACHE.get(key)
    if idx is None:
        b_i = np.arange(batch)[:, None, None, None, None, None]
        c_i = np.arange(cin)[None, None, None, :, None, None]
        oy = np.arange(oh)[None, :, None, None, None, None] * stride
        ox = np.arange(ow)[None, None, :, None, None, None] * stride
        ky = np.arange(kh)[None, None, None, None, :, None]
        kx = np.arange(kw)[None, None, None, None, None, :]
        flat = ((b_i * cin + c_i) * hp + oy + ky) * wp + (ox + kx)
        idx = np.ascontiguousarray(
            np.broadcast_to(flat, (batch, oh, ow, cin, kh, kw)).reshape(batch, oh * ow, cin * kh * kw))
        _IM2COL_CACHE[key] = idx
    return idx, oh, ow


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW layout, weight (cout, cin, kh, kw)."""
    batch, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ad.ShapeError(f"conv2d channels mismatch: input {cin}, weight {cin_w}")
    xp = ad.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    idx, oh, ow = _im2col_indices(batch, cin, h, wdt, kh, kw, stride, padding)
    cols = ad.take_flat(xp, idx, (batch, oh * ow, cin * kh * kw))
    wmat = ad.transpose(ad.reshape(w, (cout, cin * kh * kw)), (1, 0))
    out = ad.matmul(cols, wmat)
    if b is not None:
        out = ad.add(out, b)
    out = ad.transpose(out, (0, 2, 1))
    return ad.reshape(out, (batch, cout, oh, ow))


def attention(q, k, v, mask_bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis of k/v.

    ``mask_bias`` is added to the logits before softmax (0 for visible keys,
    MASK_NEG for hidden ones).
    """
    dk = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                    1.0 / np.sqrt(dk))
    if mask_bias is not None:
        scores = ad.add(scores, mask_bias)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos timestep features; plain numpy (never differentiated)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def normal_init(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std
