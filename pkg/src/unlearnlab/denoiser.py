"""Text-conditioned denoisers: the image network and its video inflation.

The image denoiser is a three-level residual conv net (widths 32/64/64) with
sinusoidal time embeddings and one cross-attention block per level reading the
text encoder's token embeddings.  The output conv is zero-initialized.

The video denoiser reuses the image weights verbatim as a frozen spatial path
and inserts residual temporal-attention blocks whose output projections start
at zero, so before fine-tuning it equals the image denoiser frame by frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor
from .params import ParamSet
from .text import TextEmbedding

__all__ = [
    "CondBatch", "init_image_denoiser", "init_video_denoiser",
    "denoise_image", "denoise_video", "TEMPORAL_STAGES",
]

TEMPORAL_STAGES = ("l0", "l1", "l2", "d1", "d0")


@dataclass
class CondBatch:
    """Batched conditioning: embeddings, key mask, and per-item null flags."""

    emb: Tensor          # (B, L, d)
    mask: np.ndarray     # (B, L) bool
    null: np.ndarray     # (B,) bool — condition these items on the learned null row


def init_image_denoiser(cin: int = 3, d_text: int = 64, widths: tuple[int, int, int] = (32, 64, 64),
                        d_time: int = 64, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    ps = ParamSet()
    w0, w1, w2 = widths

    def conv(name, cout, cin_, k=3, zero=False):
        std = 0.0 if zero else (cin_ * k * k) ** -0.5
        ps.add(name + ".w", np.zeros((cout, cin_, k, k)) if zero else
               nn.normal_init(rng, (cout, cin_, k, k), std))
        ps.add(name + ".b", np.zeros(cout))

    def lnorm(name, c):
        ps.add(name + ".g", np.ones(c))
        ps.add(name + ".b", np.zeros(c))

    def res(name, c):
        lnorm(name + ".ln1", c)
        conv(name + ".conv1", c, c)
        ps.add(name + ".time_w", nn.normal_init(rng, (d_time, c), d_time**-0.5))
        ps.add(name + ".time_b", np.zeros(c))
        lnorm(name + ".ln2", c)
        conv(name + ".conv2", c, c)

    def xattn(name, c):
        lnorm(name + ".ln", c)
        ps.add(name + ".wq", nn.normal_init(rng, (c, c), c**-0.5))
        ps.add(name + ".wk", nn.normal_init(rng, (d_text, c), d_text**-0.5))
        ps.add(name + ".wv", nn.normal_init(rng, (d_text, c), d_text**-0.5))
        ps.add(name + ".wo", nn.normal_init(rng, (c, c), c**-0.5))
        ps.add(name + ".bo", np.zeros(c))

    ps.add("den.time.w1", nn.normal_init(rng, (d_time, d_time), d_time**-0.5))
    ps.add("den.time.b1", np.zeros(d_time))
    ps.add("den.time.w2", nn.normal_init(rng, (d_time, d_time), d_time**-0.5))
    ps.add("den.time.b2", np.zeros(d_time))
    ps.add("den.null_emb", nn.normal_init(rng, (1, d_text), 0.02))
    # zero start: pooled-text modulation of the time pathway grows in during
    # training without disturbing the init-time output contracts
    ps.add("den.pool.w", np.zeros((d_text, d_time)))
    ps.add("den.pool.b", np.zeros(d_time))
    conv("den.conv_in", w0, cin)
    res("den.l0.res", w0)
    xattn("den.l0.xattn", w0)
    conv("den.down0", w1, w0)
    res("den.l1.res", w1)
    xattn("den.l1.xattn", w1)
    conv("den.down1", w2, w1)
    res("den.l2.res", w2)
    xattn("den.l2.xattn", w2)
    conv("den.up1", w1, w2)
    res("den.d1.res", w1)
    conv("den.up0", w0, w1)
    res("den.d0.res", w0)
    conv("den.conv_out", cin, w0, zero=True)
    return ps


def init_video_denoiser(image_params: ParamSet, frames: int, seed: int = 0) -> ParamSet:
    """Frozen spatial copy of a trained image denoiser plus trainable temporal blocks."""
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    ps = ParamSet()
    for name, t in image_params.items():
        ps.add("vid." + name, t.data.copy(), frozen=True)
    widths = {
        "l0": image_params["den.conv_in.w"].shape[0],
        "l1": image_params["den.down0.w"].shape[0],
        "l2": image_params["den.down1.w"].shape[0],
        "d1": image_params["den.up1.w"].shape[0],
        "d0": image_params["den.up0.w"].shape[0],
    }
    for stage in TEMPORAL_STAGES:
        c = widths[stage]
        p = f"vid.tmp.{stage}."
        ps.add(p + "ln.g", np.ones(c))
        ps.add(p + "ln.b", np.zeros(c))
        ps.add(p + "pos", nn.normal_init(rng, (frames, c), 0.02))
        for nm in ("wq", "wk", "wv"):
            ps.add(p + nm, nn.normal_init(rng, (c, c), c**-0.5))
        ps.add(p + "wo", np.zeros((c, c)))  # zero output: residual is exactly 0 at init
        ps.add(p + "bo", np.zeros(c))
    return ps


# -- forward building blocks ---------------------------------------------------


def _chan_ln(x: Tensor, params: ParamSet, name: str) -> Tensor:
    """Layer norm over the channel axis of an NCHW tensor."""
    h = ad.transpose(x, (0, 2, 3, 1))
    h = ad.layer_norm(h, params[name + ".g"], params[name + ".b"])
    return ad.transpose(h, (0, 3, 1, 2))


def _resblock(x: Tensor, temb: Tensor, params: ParamSet, name: str) -> Tensor:
    u = ad.gelu(_chan_ln(x, params, name + ".ln1"))
    u = nn.conv2d(u, params[name + ".conv1.w"], params[name + ".conv1.b"], padding=1)
    tproj = nn.linear(temb, params[name + ".time_w"], params[name + ".time_b"])
    u = ad.add(u, ad.reshape(tproj, (tproj.shape[0], tproj.shape[1], 1, 1)))
    u = ad.gelu(_chan_ln(u, params, name + ".ln2"))
    u = nn.conv2d(u, params[name + ".conv2.w"], params[name + ".conv2.b"], padding=1)
    return ad.add(x, u)


def _xattn(x: Tensor, emb: Tensor, mask_bias: np.ndarray, params: ParamSet, name: str) -> Tensor:
    b, c, h, w = x.shape
    s = ad.reshape(ad.transpose(x, (0, 2, 3, 1)), (b, h * w, c))
    s = ad.layer_norm(s, params[name + ".ln.g"], params[name + ".ln.b"])
    q = ad.matmul(s, params[name + ".wq"])
    k = ad.matmul(emb, params[name + ".wk"])
    v = ad.matmul(emb, params[name + ".wv"])
    att = nn.attention(q, k, v, mask_bias=mask_bias)
    o = ad.add(ad.matmul(att, params[name + ".wo"]), params[name + ".bo"])
    o = ad.transpose(ad.reshape(o, (b, h, w, c)), (0, 3, 1, 2))
    return ad.add(x, o)


def _time_features(t: np.ndarray, params: ParamSet, prefix: str) -> Tensor:
    d_time = params[prefix + "time.w1"].shape[0]
    sin = ad.constant(nn.sinusoidal_embedding(t, d_time))
    h = ad.gelu(nn.linear(sin, params[prefix + "time.w1"], params[prefix + "time.b1"]))
    return nn.linear(h, params[prefix + "time.w2"], params[prefix + "time.b2"])


def _effective_cond(cond: CondBatch | None, batch: int, params: ParamSet, prefix: str) -> tuple[Tensor, np.ndarray]:
    """Resolve conditioning to (emb, key mask), substituting the learned null row."""
    null_row = params[prefix + "null_emb"]  # (1, d)
    d = null_row.shape[1]
    if cond is not None and (cond.emb.ndim != 3 or cond.emb.shape[0] != batch):
        raise ShapeError(f"conditioning batch {cond.emb.shape} does not match input batch {batch}")
    if cond is None or cond.null.all():
        # all-null batches take the same single-row path as c=None so the two
        # are equal bitwise, not merely up to BLAS accumulation order
        ones = ad.constant(np.ones((batch, 1, 1)))
        return ad.mul(ones, ad.reshape(null_row, (1, 1, d))), np.ones((batch, 1), dtype=bool)
    emb, mask, null = cond.emb, cond.mask, cond.null
    if null.any():
        sel = ad.constant(null.astype(np.float64).reshape(batch, 1, 1))
        keep = ad.constant((~null).astype(np.float64).reshape(batch, 1, 1))
        emb = ad.add(ad.mul(emb, keep), ad.mul(ad.reshape(null_row, (1, 1, d)), sel))
        mask = mask.copy()
        mask[null] = False
        mask[null, 0] = True  # null items attend to the single substituted row
    return emb, mask


def _pooled_cond(emb: Tensor, mask: np.ndarray, params: ParamSet, prefix: str) -> Tensor:
    """Masked mean of the token rows, projected into the time-embedding width.

    Token-level detail still flows through cross-attention; this gives the
    resblocks a global summary of the prompt at every level.
    """
    w = mask.astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)
    pooled = ad.sum_(ad.mul(emb, ad.constant(w[:, :, None])), axis=1)
    return nn.linear(pooled, params[prefix + "pool.w"], params[prefix + "pool.b"])


def _spatial_forward(x: Tensor, temb: Tensor, emb: Tensor, mask: np.ndarray,
                     params: ParamSet, prefix: str, hook=None) -> Tensor:
    bias = np.where(mask[:, None, :], 0.0, nn.MASK_NEG)

    def stage(h, name):
        h = _resblock(h, temb, params, prefix + name + ".res")
        if (prefix + name + ".xattn.ln.g") in params:
            h = _xattn(h, emb, bias, params, prefix + name + ".xattn")
        return hook(name, h) if hook is not None else h

    h = nn.conv2d(x, params[prefix + "conv_in.w"], params[prefix + "conv_in.b"], padding=1)
    h = stage(h, "l0")
    s0 = h
    h = nn.conv2d(h, params[prefix + "down0.w"], params[prefix + "down0.b"], stride=2, padding=1)
    h = stage(h, "l1")
    s1 = h
    h = nn.conv2d(h, params[prefix + "down1.w"], params[prefix + "down1.b"], stride=2, padding=1)
    h = stage(h, "l2")
    h = nn.conv2d(ad.upsample2x(h), params[prefix + "up1.w"], params[prefix + "up1.b"], padding=1)
    h = stage(ad.add(h, s1), "d1")
    h = nn.conv2d(ad.upsample2x(h), params[prefix + "up0.w"], params[prefix + "up0.b"], padding=1)
    h = stage(ad.add(h, s0), "d0")
    return nn.conv2d(h, params[prefix + "conv_out.w"], params[prefix + "conv_out.b"], padding=1)


def _as_cond_batch(c, batch: int) -> CondBatch | None:
    if c is None or isinstance(c, CondBatch):
        return c
    if isinstance(c, TextEmbedding):
        emb = c.emb if c.emb.ndim == 3 else ad.reshape(c.emb, (1,) + c.emb.shape)
        if emb.shape[0] == 1 and batch > 1:
            emb = ad.mul(ad.constant(np.ones((batch, 1, 1))), emb)
            mask = np.broadcast_to(c.mask, (batch,) + c.mask.shape).copy()
        else:
            mask = c.mask if c.mask.ndim == 2 else c.mask[None].copy()
        return CondBatch(emb=emb, mask=np.ascontiguousarray(mask), null=np.zeros(batch, dtype=bool))
    raise TypeError(f"unsupported conditioning type {type(c).__name__}")


def denoise_image(z_t, t, c, params: ParamSet, prefix: str = "den.") -> Tensor:
    """Predict the noise in ``z_t`` at step ``t``, conditioned on text (or null)."""
    x = z_t if isinstance(z_t, Tensor) else ad.constant(np.asarray(z_t, dtype=np.float64))
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"denoise_image expects (B,C,H,W) or (C,H,W), got {z_t.shape}")
    b = x.shape[0]
    if x.shape[1] != params[prefix + "conv_in.w"].shape[1]:
        raise ShapeError(f"latent has {x.shape[1]} channels, denoiser expects "
                         f"{params[prefix + 'conv_in.w'].shape[1]}")
    t_arr = np.full(b, int(t), dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
    if t_arr.shape != (b,):
        raise ShapeError(f"t has shape {t_arr.shape} for a batch of {b}")
    temb = _time_features(t_arr, params, prefix)
    emb, mask = _effective_cond(_as_cond_batch(c, b), b, params, prefix)
    temb = ad.add(temb, _pooled_cond(emb, mask, params, prefix))
    out = _spatial_forward(x, temb, emb, mask, params, prefix)
    return ad.reshape(out, out.shape[1:]) if single else out


def _temporal_block(h: Tensor, b: int, f: int, params: ParamSet, stage: str) -> Tensor:
    bf, c, hh, ww = h.shape
    p = f"vid.tmp.{stage}."
    u = ad.reshape(h, (b, f, c, hh, ww))
    u = ad.transpose(u, (0, 3, 4, 1, 2))                # (B, H, W, F, C)
    u = ad.reshape(u, (b, hh * ww, f, c))
    s = ad.layer_norm(u, params[p + "ln.g"], params[p + "ln.b"])
    s = ad.add(s, params[p + "pos"])
    q = ad.matmul(s, params[p + "wq"])
    k = ad.matmul(s, params[p + "wk"])
    v = ad.matmul(s, params[p + "wv"])
    att = nn.attention(q, k, v)
    o = ad.add(ad.matmul(att, params[p + "wo"]), params[p + "bo"])
    o = ad.reshape(o, (b, hh, ww, f, c))
    o = ad.transpose(o, (0, 3, 4, 1, 2))
    o = ad.reshape(o, (bf, c, hh, ww))
    return ad.add(h, o)


def denoise_video(z_t, t, c, params: ParamSet) -> Tensor:
    """Per-frame noise prediction with temporal attention mixing across frames."""
    x = z_t if isinstance(z_t, Tensor) else ad.constant(np.asarray(z_t, dtype=np.float64))
    single = x.ndim == 4
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 5:
        raise ShapeError(f"denoise_video expects (B,F,C,H,W) or (F,C,H,W), got {z_t.shape}")
    b, f = x.shape[0], x.shape[1]
    if f != params["vid.tmp.l0.pos"].shape[0]:
        raise ShapeError(f"clip has {f} frames, video denoiser was built for "
                         f"{params['vid.tmp.l0.pos'].shape[0]}")
    flat = ad.reshape(x, (b * f,) + x.shape[2:])
    t_arr = np.full(b, int(t), dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
    temb = _time_features(np.repeat(t_arr, f), params, "vid.den.")

    cond = _as_cond_batch(c, b)
    if cond is not None:
        emb4 = ad.reshape(cond.emb, (b, 1) + cond.emb.shape[1:])
        emb4 = ad.mul(ad.constant(np.ones((1, f, 1, 1))), emb4)
        cond = CondBatch(emb=ad.reshape(emb4, (b * f,) + cond.emb.shape[1:]),
                         mask=np.repeat(cond.mask, f, axis=0),
                         null=np.repeat(cond.null, f))
    emb, mask = _effective_cond(cond, b * f, params, "vid.den.")
    temb = ad.add(temb, _pooled_cond(emb, mask, params, "vid.den."))

    def hook(stage, h):
        return _temporal_block(h, b, f, params, stage)

    out = _spatial_forward(flat, temb, emb, mask, params, "vid.den.", hook=hook)
    out = ad.reshape(out, (b, f) + out.shape[1:])
    return ad.reshape(out, out.shape[1:]) if single else out
