"""Training loops: joint image-model fitting and temporal-only video fitting.

The image phase optimizes the text encoder and the image denoiser together
through the conditional latent loss, with classifier-free-guidance dropout.
The video phase keeps the encoder and the copied spatial path untouched and
fits only the temporal attention blocks.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError
from .codec import LatentCodec
from .denoiser import CondBatch, denoise_video
from .diffusion import NoiseSchedule, loss_ldm_cond, q_sample
from .optim import adam_step, init_adam
from .params import ParamSet, value_and_grad
from .text import Prompt, Vocabulary, encode_batch, tokenize

__all__ = ["TrainConfig", "TrainResult", "TrainingError", "loss_ldm_video",
           "train_image_model", "train_video_model", "write_loss_csv"]


class TrainingError(RuntimeError):
    """Training could not run or diverged mid-run."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    lr: float = 2e-3
    lr_final: float | None = None   # linear per-epoch decay target; None = constant
    p_uncond: float = 0.1
    n_heads: int = 4
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainingError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TrainResult:
    loss_curve: list[float]        # one mean loss per epoch
    step_losses: list[float]
    duration_s: float
    config: TrainConfig


def write_loss_csv(curve, path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "loss"])
        for i, v in enumerate(curve, start=1):
            wr.writerow([i, f"{float(v):.10g}"])


def _tokenized(corpus, vocab: Vocabulary) -> list[Prompt]:
    return [tokenize(item.prompt, vocab) for item in corpus]


def _merged_view(*sets: ParamSet) -> ParamSet:
    """One ParamSet sharing the underlying tensors of several (for joint steps)."""
    merged = ParamSet()
    for ps in sets:
        for name, t in ps.items():
            merged.adopt(name, t, frozen=ps.is_frozen(name))
    return merged


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_final is None or config.epochs < 2:
        return config.lr
    frac = epoch / (config.epochs - 1)
    return config.lr + frac * (config.lr_final - config.lr)


def _run_epochs(n_items: int, config: TrainConfig, step_fn, set_lr=None) -> TrainResult:
    rng_order = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    t0 = time.perf_counter()
    curve, step_losses = [], []
    for epoch in range(config.epochs):
        if set_lr is not None:
            set_lr(_lr_at(config, epoch))
        perm = rng_order.permutation(n_items)
        epoch_losses = []
        for step, lo in enumerate(range(0, n_items, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]
            try:
                loss = step_fn(idx)
            except NumericError as e:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}") from e
            epoch_losses.append(loss)
            step_losses.append(loss)
        curve.append(float(np.mean(epoch_losses)))
    return TrainResult(curve, step_losses, time.perf_counter() - t0, config)


def train_image_model(corpus, vocab: Vocabulary, codec: LatentCodec,
                      encoder_params: ParamSet, denoiser_params: ParamSet,
                      sched: NoiseSchedule, config: TrainConfig) -> TrainResult:
    """Jointly fit encoder and image denoiser in place; returns the loss curve.

    Batching order and the per-step (t, eps, dropout) draws are functions of
    ``config.seed`` alone, so identical inputs give identical checkpoints.
    """
    if not corpus:
        raise TrainingError("image corpus is empty")
    d_enc = encoder_params["enc.proj.w"].shape[1]
    d_den = denoiser_params["den.null_emb"].shape[1]
    if d_enc != d_den:
        raise TrainingError(
            f"encoder emits width {d_enc} but denoiser reads width {d_den}")
    prompts = _tokenized(corpus, vocab)
    x = np.stack([item.data for item in corpus])
    merged = _merged_view(encoder_params, denoiser_params)
    state = init_adam(merged, lr=config.lr)
    rng_draws = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])

    def step_fn(idx):
        def loss_fn(_):
            return loss_ldm_cond(x[idx], [prompts[i] for i in idx], codec,
                                 encoder_params, denoiser_params, sched,
                                 rng_draws, p_uncond=config.p_uncond,
                                 n_heads=config.n_heads)
        loss, grads = value_and_grad(loss_fn, merged)
        adam_step(merged, grads, state)
        return loss

    def set_lr(lr):
        state.lr = lr

    return _run_epochs(len(corpus), config, step_fn, set_lr)


def loss_ldm_video(x0, prompts, codec: LatentCodec, encoder_params: ParamSet,
                   video_params: ParamSet, sched: NoiseSchedule,
                   rng: np.random.Generator, p_uncond: float = 0.0,
                   n_heads: int = 4):
    """Video latent loss; one t per clip, encoder read but never differentiated.

    Draw order matches loss_ldm_cond: t per item, eps over the batch, then
    the dropout uniforms (only when p_uncond > 0).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 4:
        x0 = x0[None]
    if x0.ndim != 5:
        raise ShapeError(f"expected (B,F,C,H,W) clips, got {x0.shape}")
    b, f = x0.shape[:2]
    if isinstance(prompts, Prompt):
        prompts = [prompts]
    if len(prompts) != b:
        raise ShapeError(f"{len(prompts)} prompts for a batch of {b} clips")
    z = codec.encode(x0.reshape((b * f,) + x0.shape[2:]))
    z = z.reshape((b, f) + z.shape[1:])
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(z.shape)
    z_t = q_sample(z, t, eps, sched)
    drop = rng.random(b) < p_uncond if p_uncond > 0.0 else np.zeros(b, dtype=bool)
    ids = np.stack([p.ids for p in prompts])
    masks = np.stack([p.mask for p in prompts])
    with ad.no_grad():
        emb = encode_batch(ids, masks, encoder_params, n_heads=n_heads)
    cond = CondBatch(emb=ad.constant(emb.data), mask=masks, null=drop)
    eps_hat = denoise_video(z_t, t, cond, video_params)
    return ad.mse(eps_hat, ad.constant(eps))


def train_video_model(video_corpus, vocab: Vocabulary, codec: LatentCodec,
                      encoder_params: ParamSet, video_params: ParamSet,
                      sched: NoiseSchedule, config: TrainConfig) -> TrainResult:
    """Fit the temporal blocks in place; spatial path and encoder stay put."""
    if not video_corpus:
        raise TrainingError("video corpus is empty")
    loose = [n for n, _ in video_params.items()
             if n.startswith("vid.den.") and not video_params.is_frozen(n)]
    if loose:
        raise TrainingError(f"spatial path must be frozen, found trainable {loose[:3]}")
    frames = video_params["vid.tmp.l0.pos"].shape[0]
    for item in video_corpus:
        if item.data.shape[0] != frames:
            raise TrainingError(
                f"clip has {item.data.shape[0]} frames, model was built for {frames}")
    prompts = _tokenized(video_corpus, vocab)
    x = np.stack([item.data for item in video_corpus])
    state = init_adam(video_params, lr=config.lr)
    rng_draws = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])

    def step_fn(idx):
        def loss_fn(_):
            return loss_ldm_video(x[idx], [prompts[i] for i in idx], codec,
                                  encoder_params, video_params, sched,
                                  rng_draws, p_uncond=config.p_uncond,
                                  n_heads=config.n_heads)
        loss, grads = value_and_grad(loss_fn, video_params)
        adam_step(video_params, grads, state)
        return loss

    def set_lr(lr):
        state.lr = lr

    return _run_epochs(len(video_corpus), config, step_fn, set_lr)
