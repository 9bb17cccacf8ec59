"""Noise schedules, the forward process, training losses, CFG, and sampling.

Schedules are variance-preserving: alpha_t^2 + sigma_t^2 = 1 with the
signal-to-noise ratio log(alpha^2/sigma^2) strictly decreasing over the chain.
Arrays are indexed 0..T with index 0 the clean-data boundary (alpha=1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .codec import LatentCodec
from .denoiser import CondBatch, denoise_image
from .params import ParamSet
from .text import Prompt, encode_batch

__all__ = [
    "NoiseSchedule", "make_schedule", "q_sample", "snr",
    "loss_dm", "loss_ldm_cond", "guided_eps", "sample",
    "schedule_to_json", "schedule_from_json",
]

# linear_beta construction targets: first-step beta and terminal alpha_bar
_BETA_MIN = 0.012
_ALPHA_BAR_END = 0.018
# cosine construction: alpha_bar endpoints, eased in logit space
_COS_HI = 0.9875
_COS_LO = 0.012


@dataclass
class NoiseSchedule:
    T: int
    kind: str
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1
    alpha: np.ndarray      # sqrt(alpha_bar)
    sigma: np.ndarray      # sqrt(1 - alpha_bar)

    def snr(self, t: int) -> float:
        self._check_t(t)
        return float(np.log(self.alpha[t] ** 2 / self.sigma[t] ** 2))

    def snr_curve(self) -> np.ndarray:
        a = self.alpha_bar[1:]
        return np.log(a / (1.0 - a))

    def _check_t(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def _linear_beta_alpha_bar(T: int) -> np.ndarray:
    beta_min = min(_BETA_MIN, 1.2 / T)

    def alpha_bar_end(beta_max: float) -> float:
        betas = np.linspace(beta_min, beta_max, T)
        return float(np.cumprod(1.0 - betas)[-1])

    if alpha_bar_end(beta_min) <= _ALPHA_BAR_END:
        beta_max = beta_min  # chain already noisy enough at the flat floor
    else:
        lo, hi = beta_min, 0.99995
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if alpha_bar_end(mid) > _ALPHA_BAR_END:
                lo = mid
            else:
                hi = mid
        beta_max = 0.5 * (lo + hi)
    betas = np.linspace(beta_min, beta_max, T)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def _cosine_alpha_bar(T: int) -> np.ndarray:
    u = np.arange(T, dtype=np.float64) / (T - 1)
    ease = 0.5 * (1.0 - np.cos(np.pi * u))
    logit_hi = np.log(_COS_HI / (1.0 - _COS_HI))
    logit_lo = np.log(_COS_LO / (1.0 - _COS_LO))
    logits = logit_hi + ease * (logit_lo - logit_hi)
    return np.concatenate([[1.0], 1.0 / (1.0 + np.exp(-logits))])


def make_schedule(T: int, kind: str = "linear_beta") -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"schedule needs an integer T >= 2, got {T!r}")
    T = int(T)
    if kind == "linear_beta":
        ab = _linear_beta_alpha_bar(T)
    elif kind == "cosine":
        ab = _cosine_alpha_bar(T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, kind=kind, alpha_bar=ab,
                         alpha=np.sqrt(ab), sigma=np.sqrt(1.0 - ab))


def snr(sched: NoiseSchedule, t: int) -> float:
    return sched.snr(t)


def schedule_to_json(sched: NoiseSchedule) -> str:
    return json.dumps({
        "T": sched.T,
        "kind": sched.kind,
        "alpha": sched.alpha.tolist(),
        "sigma": sched.sigma.tolist(),
        "alpha_bar": sched.alpha_bar.tolist(),
    }, indent=2)


def schedule_from_json(text: str) -> NoiseSchedule:
    doc = json.loads(text)
    return NoiseSchedule(T=int(doc["T"]), kind=doc["kind"],
                         alpha_bar=np.asarray(doc["alpha_bar"]),
                         alpha=np.asarray(doc["alpha"]),
                         sigma=np.asarray(doc["sigma"]))


# -- forward process and losses -------------------------------------------------


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = alpha_t * x0 + sigma_t * eps, broadcasting per-item t over a batch."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match data shape {x0.shape}")
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.min() < 1 or t_arr.max() > sched.T:
        raise ValueError(f"timestep {t} outside 1..{sched.T}")
    if t_arr.ndim == 0:
        return sched.alpha[t_arr] * x0 + sched.sigma[t_arr] * eps
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    return sched.alpha[t_arr].reshape(bshape) * x0 + sched.sigma[t_arr].reshape(bshape) * eps


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")


def loss_dm(x0, denoiser, sched: NoiseSchedule, rng: np.random.Generator) -> Tensor:
    """Eps-prediction loss: draw (t, eps), noise x0, and score the denoiser.

    Draw order (documented contract): t ~ integers(1, T+1) per batch item,
    then eps ~ standard_normal over the whole batch shape.
    """
    x0, _ = _as_batch(x0)
    b = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = denoiser(x_t, t)
    return ad.mse(eps_hat, ad.constant(eps))


def loss_ldm_cond(x0, prompts, codec: LatentCodec, encoder_params: ParamSet,
                  denoiser_params: ParamSet, sched: NoiseSchedule,
                  rng: np.random.Generator, p_uncond: float = 0.0,
                  n_heads: int = 4) -> Tensor:
    """Conditional latent-diffusion loss, differentiable into encoder and denoiser.

    Draw order: t per item, eps over the batch, then (only if p_uncond > 0)
    one uniform per item deciding null-conditioning dropout.
    """
    x0, _ = _as_batch(x0)
    if isinstance(prompts, Prompt):
        prompts = [prompts]
    if len(prompts) != x0.shape[0]:
        raise ShapeError(f"{len(prompts)} prompts for a batch of {x0.shape[0]} images")
    z = codec.encode(x0)
    b = z.shape[0]
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(z.shape)
    z_t = q_sample(z, t, eps, sched)
    drop = rng.random(b) < p_uncond if p_uncond > 0.0 else np.zeros(b, dtype=bool)
    ids = np.stack([p.ids for p in prompts])
    masks = np.stack([p.mask for p in prompts])
    emb = encode_batch(ids, masks, encoder_params, n_heads=n_heads)
    cond = CondBatch(emb=emb, mask=masks, null=drop)
    eps_hat = denoise_image(z_t, t, cond, denoiser_params)
    return ad.mse(eps_hat, ad.constant(eps))


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 1.0:
        return eps_cond.copy()
    if w == 0.0:
        return eps_uncond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


# -- ancestral sampler -----------------------------------------------------------


def sample(denoiser, c, sched: NoiseSchedule, w: float, seed: int,
           shape: tuple[int, ...], frame_locked_noise: bool = False,
           max_abs: float = 1e6, x0_clip=None) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise down to x_0.

    ``denoiser(x, t, c_or_None) -> eps_hat`` is called with the conditioning
    and, when 0 < w != 1, also with None for the unconditional branch.
    ``frame_locked_noise`` reuses one noise draw across the leading (frame)
    axis — used to verify that freshly inflated video models reproduce the
    image model frame for frame.

    ``x0_clip`` switches each step to the x0-parameterized posterior mean,
    squashing the implied x0 through the given (lo, hi) bounds or callable
    first. Guided sampling extrapolates eps_hat, and at small resolutions
    the implied x0 routinely leaves the data range early in the reverse
    pass; clamping it there keeps the trajectory near the data manifold.
    ``None`` leaves the eps-form update untouched.
    """
    rng = np.random.default_rng(seed)

    def draw() -> np.ndarray:
        if frame_locked_noise:
            one = rng.standard_normal(shape[1:])
            return np.broadcast_to(one, shape).copy()
        return rng.standard_normal(shape)

    def predict(x: np.ndarray, t: int) -> np.ndarray:
        if c is None or w == 0.0:
            e = denoiser(x, t, None)
        elif w == 1.0:
            e = denoiser(x, t, c)
        else:
            e_c = denoiser(x, t, c)
            e_u = denoiser(x, t, None)
            return guided_eps(_np(e_c), _np(e_u), w)
        return _np(e)

    def _np(v) -> np.ndarray:
        return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)

    with ad.no_grad():
        x = draw()
        ab = sched.alpha_bar
        for t in range(sched.T, 0, -1):
            eps_hat = predict(x, t)
            if eps_hat.shape != x.shape:
                raise ShapeError(f"denoiser returned {eps_hat.shape} for input {x.shape}")
            a_step = ab[t] / ab[t - 1]
            beta_t = 1.0 - a_step
            if x0_clip is None:
                mean = (x - beta_t / np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(a_step)
            else:
                x0 = (x - np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(ab[t])
                x0 = x0_clip(x0) if callable(x0_clip) else np.clip(x0, *x0_clip)
                if np.shape(x0) != x.shape:
                    raise ShapeError(f"x0_clip returned {np.shape(x0)} for input {x.shape}")
                mean = (np.sqrt(ab[t - 1]) * beta_t * x0
                        + np.sqrt(a_step) * (1.0 - ab[t - 1]) * x) / (1.0 - ab[t])
            if t > 1:
                var = beta_t * (1.0 - ab[t - 1]) / (1.0 - ab[t])
                x = mean + np.sqrt(var) * draw()
            else:
                x = mean
            if np.abs(x).max() > max_abs or not np.all(np.isfinite(x)):
                raise NumericError("sample", f"diverged at step t={t}")
    return x
