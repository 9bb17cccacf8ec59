"""Few-shot gradient-ascent unlearning of the shared text encoder.

The procedure maximizes the conditional diffusion loss on a handful of
(image, prompt) pairs exemplifying one concept, updating only a copy of the
text encoder.  The generative stack — codec, image denoiser, video temporal
blocks — is never touched, which is what lets a single encoder edit transfer
into every pipeline that reads it.
"""

from __future__ import annotations

import json
import pathlib
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .autodiff import NumericError
from .codec import LatentCodec
from .diffusion import NoiseSchedule, loss_ldm_cond
from .optim import adam_step, init_adam
from .params import ParamSet, load_params, save_params, value_and_grad
from .text import Vocabulary, tokenize
from .world import FewShotSet

__all__ = ["UnlearnConfig", "UnlearnResult", "UnlearnError",
           "unlearn_concept", "unlearn_multi", "transfer_encoder"]

_RESULT_VERSION = 1


class UnlearnError(RuntimeError):
    """An unlearning run that could not start or went off the rails."""


@dataclass(frozen=True)
class UnlearnConfig:
    """Knobs for one ascent run.  The defaults are the reference recipe."""

    epochs: int = 5
    batch_size: int = 2
    k: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.98
    n_heads: int = 4
    seed: int = 0
    max_drift: float = 0.5   # abort if any weight moves this far from its start

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UnlearnConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise UnlearnError(f"unknown unlearning config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class UnlearnResult:
    """Everything one run produced: the edited encoder plus its paper trail."""

    encoder: ParamSet
    concept: str
    sense: str | None
    prompt: str
    provenance: str
    loss_trace: list[float]          # mean loss per epoch, natural sign (ascending)
    delta_l2: dict[str, float]       # per-group L2 of (edited - pristine)
    delta_max: dict[str, float]      # per-group max |edited - pristine|
    duration_s: float
    frozen_checksums: dict[str, str]
    config: UnlearnConfig
    steps: int = 0

    def summary(self) -> dict:
        return {
            "version": _RESULT_VERSION,
            "concept": self.concept,
            "sense": self.sense,
            "prompt": self.prompt,
            "provenance": self.provenance,
            "loss_trace": [float(v) for v in self.loss_trace],
            "delta_l2": self.delta_l2,
            "delta_max": self.delta_max,
            "duration_s": self.duration_s,
            "frozen_checksums": self.frozen_checksums,
            "steps": self.steps,
            "config": json.loads(self.config.to_json()),
        }

    def save(self, dirpath) -> None:
        d = pathlib.Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        save_params(self.encoder, d / "encoder.params")
        (d / "result.json").write_text(json.dumps(self.summary(), indent=2,
                                                  sort_keys=True))

    @classmethod
    def load(cls, dirpath) -> "UnlearnResult":
        d = pathlib.Path(dirpath)
        doc = json.loads((d / "result.json").read_text())
        if doc.get("version") != _RESULT_VERSION:
            raise UnlearnError(f"unsupported unlearning result version {doc.get('version')}")
        return cls(encoder=load_params(d / "encoder.params"),
                   concept=doc["concept"], sense=doc["sense"], prompt=doc["prompt"],
                   provenance=doc["provenance"], loss_trace=doc["loss_trace"],
                   delta_l2=doc["delta_l2"], delta_max=doc["delta_max"],
                   duration_s=doc["duration_s"],
                   frozen_checksums=doc["frozen_checksums"],
                   config=UnlearnConfig.from_json(json.dumps(doc["config"])),
                   steps=doc["steps"])


def _group(name: str) -> str:
    parts = name.split(".")
    return parts[1] if len(parts) > 1 else parts[0]


def _drift_report(before: ParamSet, after: ParamSet) -> tuple[dict, dict]:
    sq, mx = {}, {}
    for name, t in after.items():
        d = t.data - before[name].data
        g = _group(name)
        sq[g] = sq.get(g, 0.0) + float(np.sum(d * d))
        mx[g] = max(mx.get(g, 0.0), float(np.abs(d).max(initial=0.0)))
    l2 = {g: float(np.sqrt(v)) for g, v in sq.items()}
    l2["total"] = float(np.sqrt(sum(sq.values())))
    mx["total"] = max(mx.values(), default=0.0)
    return l2, mx


def _ascend(images: np.ndarray, prompts: list, codec: LatentCodec,
            pristine: ParamSet, denoiser_params: ParamSet, sched: NoiseSchedule,
            config: UnlearnConfig) -> tuple[ParamSet, list[float], int]:
    """The shared ascent loop: returns (edited encoder copy, trace, steps)."""
    enc = pristine.copy()
    trace: list[float] = []
    steps = 0
    n = images.shape[0]
    if n == 0 or config.epochs == 0:
        return enc, trace, steps
    state = init_adam(enc, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                      weight_decay=config.weight_decay)
    rng_order = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    rng_draws = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    for epoch in range(config.epochs):
        perm = rng_order.permutation(n)
        epoch_losses = []
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]

            def loss_fn(_):
                return loss_ldm_cond(images[idx], [prompts[i] for i in idx],
                                     codec, enc, denoiser_params, sched,
                                     rng_draws, n_heads=config.n_heads)

            try:
                loss, grads = value_and_grad(loss_fn, enc)
            except NumericError as e:
                raise UnlearnError(
                    f"non-finite loss at epoch {epoch} step {step}") from e
            adam_step(enc, grads, state, direction="ascent")
            steps += 1
            for name, t in enc.items():
                moved = float(np.abs(t.data - pristine[name].data).max())
                if moved > config.max_drift:
                    raise UnlearnError(
                        f"catastrophic drift: {name} moved {moved:.3g} "
                        f"(> {config.max_drift}) at epoch {epoch} step {step}")
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    denoiser_params.zero_grads()   # backward leaves stale grads on the frozen stack
    return enc, trace, steps


def _checked_run(images, prompts, codec, encoder_params, denoiser_params,
                 sched, config) -> tuple[ParamSet, list[float], int, float, dict]:
    t0 = time.perf_counter()
    den_sum = denoiser_params.checksum()
    enc, trace, steps = _ascend(images, prompts, codec, encoder_params,
                                denoiser_params, sched, config)
    if denoiser_params.checksum() != den_sum:
        raise UnlearnError("denoiser changed during unlearning; this is a bug")
    sums = {"denoiser": den_sum, "codec": codec.checksum()}
    return enc, trace, steps, time.perf_counter() - t0, sums


def _validate(fewshot_k: int, encoder_params: ParamSet, denoiser_params: ParamSet,
              config: UnlearnConfig) -> None:
    if fewshot_k != config.k:
        raise UnlearnError(f"few-shot set has k={fewshot_k} but config.k={config.k}")
    if config.epochs < 0:
        raise UnlearnError(f"epochs must be >= 0, got {config.epochs}")
    if config.batch_size < 1:
        raise UnlearnError(f"batch_size must be >= 1, got {config.batch_size}")
    d_enc = encoder_params["enc.proj.w"].shape[1]
    d_den = denoiser_params["den.null_emb"].shape[1]
    if d_enc != d_den:
        raise UnlearnError(f"encoder emits width {d_enc} but denoiser reads width {d_den}")


def unlearn_concept(fewshot: FewShotSet, vocab: Vocabulary, codec: LatentCodec,
                    encoder_params: ParamSet, denoiser_params: ParamSet,
                    sched: NoiseSchedule, config: UnlearnConfig) -> UnlearnResult:
    """Ascend the diffusion loss on one few-shot set; returns an edited copy.

    The caller's encoder and denoiser are never mutated.  With k=0 or
    epochs=0 the returned encoder is a bitwise copy of the input and the
    drift report is exactly zero.
    """
    _validate(fewshot.k, encoder_params, denoiser_params, config)
    prompt = tokenize(fewshot.prompt, vocab)
    enc, trace, steps, dt, sums = _checked_run(
        fewshot.images, [prompt] * fewshot.k, codec, encoder_params,
        denoiser_params, sched, config)
    delta_l2, delta_max = _drift_report(encoder_params, enc)
    return UnlearnResult(
        encoder=enc, concept=fewshot.concept, sense=fewshot.sense,
        prompt=fewshot.prompt, provenance=fewshot.provenance, loss_trace=trace,
        delta_l2=delta_l2, delta_max=delta_max, duration_s=dt,
        frozen_checksums=sums, config=config, steps=steps)


def unlearn_multi(fewshots, vocab: Vocabulary, codec: LatentCodec,
                  encoder_params: ParamSet, denoiser_params: ParamSet,
                  sched: NoiseSchedule, config: UnlearnConfig,
                  mode: str = "sequential") -> list[UnlearnResult]:
    """Unlearn several concepts.

    Sequential mode chains full single-concept runs (concept i+1 starts from
    concept i's edited encoder), so a one-element list reduces exactly to
    :func:`unlearn_concept`.  Joint mode interleaves every set's pairs into a
    single ascent and returns a single combined result.
    """
    fewshots = list(fewshots)
    if not fewshots:
        raise UnlearnError("unlearn_multi needs at least one few-shot set")
    if mode == "sequential":
        out = []
        enc = encoder_params
        for i, fs in enumerate(fewshots):
            cfg = replace(config, seed=config.seed + i)
            out.append(unlearn_concept(fs, vocab, codec, enc, denoiser_params,
                                       sched, cfg))
            enc = out[-1].encoder
        return out
    if mode != "joint":
        raise UnlearnError(f"unknown unlearn_multi mode {mode!r}")

    for fs in fewshots:
        _validate(fs.k, encoder_params, denoiser_params, config)
    images = np.concatenate([fs.images for fs in fewshots])
    prompts = []
    for fs in fewshots:
        prompts += [tokenize(fs.prompt, vocab)] * fs.k
    cfg = replace(config, k=images.shape[0])
    enc, trace, steps, dt, sums = _checked_run(
        images, prompts, codec, encoder_params, denoiser_params, sched, cfg)
    delta_l2, delta_max = _drift_report(encoder_params, enc)
    return [UnlearnResult(
        encoder=enc, concept="+".join(fs.concept for fs in fewshots), sense=None,
        prompt="; ".join(fs.prompt for fs in fewshots),
        provenance=fewshots[0].provenance, loss_trace=trace,
        delta_l2=delta_l2, delta_max=delta_max, duration_s=dt,
        frozen_checksums=sums, config=cfg, steps=steps)]


def transfer_encoder(encoder_params: ParamSet, video_params: ParamSet) -> ParamSet:
    """Bind a (possibly edited) text encoder to a trained video model.

    Pure rebinding: the returned set is a shared view over both inputs, so it
    works directly with ``encode_batch`` (enc.* names) and ``denoise_video``
    (vid.* names).  No weight is copied or altered.
    """
    if "vid.tmp.l0.pos" not in video_params:
        raise UnlearnError("video parameters have no temporal blocks; "
                           "build them with init_video_denoiser first")
    d_enc = encoder_params["enc.proj.w"].shape[1]
    d_vid = video_params["vid.den.null_emb"].shape[1]
    if d_enc != d_vid:
        raise UnlearnError(f"encoder emits width {d_enc} but the video model "
                           f"reads width {d_vid}")
    merged = ParamSet()
    for name, t in video_params.items():
        merged.adopt(name, t, frozen=video_params.is_frozen(name))
    for name, t in encoder_params.items():
        merged.adopt(name, t, frozen=encoder_params.is_frozen(name))
    return merged
