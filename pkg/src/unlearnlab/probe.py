"""Concept-presence probe: per-attribute classifier heads over conv features.

Each input item is a 6-channel stack [frame RGB, next-frame difference RGB];
stills use a zero difference. Appearance heads read the frame channels,
the motion head reads the difference channels, and every judgment is gated
on held-out accuracy.
"""

from __future__ import annotations

import json
import pathlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .optim import adam_step, init_adam
from .params import ParamSet, load_params, save_params, value_and_grad
from .world import (FRAMES, RES, ConceptSpec, Grammar, IDENTITY_COLOR, SceneSpec,
                    WorldError, _BG, motion_start, render_image, render_video)

HEADS = {
    "shape": ("circle", "square", "triangle", "ellipse", "other"),
    "color": ("red", "green", "blue"),
    "style": ("plain", "striped"),
    "identity": ("none", "blob", "wisp"),
    "motion": ("static", "left", "right", "up", "bounce", "drift"),
}
GATE = 0.95
_MAGIC_VERSION = 1


class ProbeError(RuntimeError):
    """Raised when the probe cannot be trusted (gate failure, bad inputs)."""


# -- feature construction -----------------------------------------------------------


def clip_items(frames: np.ndarray) -> np.ndarray:
    """(3,H,W) still or (F,3,H,W) clip -> (N,6,H,W) [frame, frame-diff] items."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        return np.concatenate([frames, np.zeros_like(frames)])[None]
    if frames.ndim != 4:
        raise ProbeError(f"expected a still or a clip, got shape {frames.shape}")
    if frames.shape[0] == 1:
        return clip_items(frames[0])
    out = np.empty((frames.shape[0] - 1, 6) + frames.shape[2:])
    out[:, :3] = frames[:-1]
    out[:, 3:] = frames[1:] - frames[:-1]
    return out


def _scene_labels(scene: SceneSpec, motion_label: str) -> dict[str, int]:
    ident = scene.shape in IDENTITY_COLOR
    shape = "other" if ident else scene.shape
    color = IDENTITY_COLOR[scene.shape] if ident else scene.color
    style = "striped" if scene.style in ("striped", "drift") else "plain"
    return {
        "shape": HEADS["shape"].index(shape),
        "color": HEADS["color"].index(color),
        "style": HEADS["style"].index(style),
        "identity": HEADS["identity"].index(scene.shape if ident else "none"),
        "motion": HEADS["motion"].index(motion_label),
    }


@dataclass
class ProbeCorpus:
    features: np.ndarray                 # (N,6,R,R)
    labels: dict[str, np.ndarray]        # head -> (N,) int; -1 on noise rows
    noise: np.ndarray                    # (N,) bool


def build_probe_corpus(grammar: Grammar, seed: int = 0,
                       stills_per_combo: int = 16) -> ProbeCorpus:
    """Labeled rendered items covering every attribute value, plus noise rows.

    Position is varied heavily; with few placements per combination the probe
    memorizes locations instead of silhouettes and fails the held-out gate.
    """
    rng = np.random.default_rng(seed)
    feats, labels = [], []

    def put(item, scene, motion_label):
        feats.append(item)
        labels.append(_scene_labels(scene, motion_label))

    def jitter():
        raw = rng.uniform(5.5, 10.5, size=2)
        # half the draws land on the half-integer lattice the motion rules
        # walk, so those rasterization alias classes are represented too
        if rng.random() < 0.5:
            return tuple(np.round(raw * 2) / 2)
        return tuple(np.round(raw, 1))

    shapes = ("circle", "square", "triangle", "ellipse")
    motions = ("left", "right", "up", "bounce", "drift")
    for shape in shapes:                                   # appearance stills
        for color in HEADS["color"]:
            for style in ("plain", "striped"):
                for _ in range(stills_per_combo):
                    s = SceneSpec(shape, color, style, position=jitter())
                    put(clip_items(render_image(s))[0], s, "static")
    for ident in ("blob", "wisp"):                         # identity stills
        for _ in range(2 * stills_per_combo):
            s = SceneSpec(ident, position=jitter())
            put(clip_items(render_image(s))[0], s, "static")
    for _ in range(6 * stills_per_combo):                  # trail stills look static
        motion = motions[rng.integers(5)]
        s = SceneSpec(shapes[rng.integers(4)], HEADS["color"][rng.integers(3)],
                      ("plain", "striped")[rng.integers(2)], motion=motion,
                      position=motion_start(motion, rng))
        put(clip_items(render_image(s))[0], s, "static")
    for shape in shapes:                                   # moving clips, varied starts
        for color in HEADS["color"]:
            for motion in motions:
                for start in (None, motion_start(motion, rng),
                              motion_start(motion, rng)):
                    style = ("plain", "striped")[rng.integers(2)]
                    s = SceneSpec(shape, color, style, motion=motion,
                                  position=start, frames=FRAMES)
                    for item in clip_items(render_video(s)):
                        put(item, s, motion)
    for ident in ("blob", "wisp"):                         # identities on the move
        for motion in motions:
            for start in (None, motion_start(motion, rng)):
                s = SceneSpec(ident, motion=motion, position=start, frames=FRAMES)
                for item in clip_items(render_video(s)):
                    put(item, s, motion)

    n_clean = len(feats)
    n_noise = max(1, n_clean // 12)
    junk = [np.concatenate([rng.random((3, RES, RES)), np.zeros((3, RES, RES))])
            for _ in range(n_noise)]
    for i in rng.choice(n_clean, size=n_noise, replace=False):
        # pixel-shuffled scenes: right color statistics, no structure
        fr = feats[i][:3].reshape(3, -1)[:, rng.permutation(RES * RES)]
        junk.append(np.concatenate([fr.reshape(3, RES, RES),
                                    np.zeros((3, RES, RES))]))
    for _ in range(n_noise):
        # banded noise: stripey texture with no object to carry it
        band = rng.random((3, RES, 1)) * np.ones((1, 1, RES))
        junk.append(np.concatenate([0.5 * band + 0.5 * rng.random((3, RES, RES)),
                                    np.zeros((3, RES, RES))]))
    features = np.stack(feats + junk)
    noise = np.zeros(len(features), dtype=bool)
    noise[n_clean:] = True
    out_labels = {}
    for head in HEADS:
        col = np.full(len(features), -1, dtype=np.int64)
        col[:n_clean] = [row[head] for row in labels]
        out_labels[head] = col
    return ProbeCorpus(features, out_labels, noise)


# -- model ---------------------------------------------------------------------------


_CENTER = np.array([_BG, _BG, _BG, 0.0, 0.0, 0.0]).reshape(1, 6, 1, 1)


def _recenter(items: np.ndarray) -> np.ndarray:
    """Translate each item so its frame-mass centroid lands on the grid center.

    Placement is a nuisance variable in this world; without canonicalization
    the probe memorizes positions and misses the held-out gate. Rolling the
    frame and diff channels together preserves extent and motion direction.
    """
    out = np.empty_like(items)
    yy, xx = np.mgrid[0:items.shape[2], 0:items.shape[3]]
    my, mx = (items.shape[2] - 1) / 2.0, (items.shape[3] - 1) / 2.0
    for i, item in enumerate(items):
        w = np.abs(item[:3] - _BG).sum(axis=0)
        tot = w.sum()
        if tot < 1e-9:
            out[i] = item
            continue
        dy = int(round(my - (w * yy).sum() / tot))
        dx = int(round(mx - (w * xx).sum() / tot))
        out[i] = np.roll(item, (dy, dx), axis=(1, 2))
    return out


def _init_probe_params(seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    p = ParamSet()
    p.add("probe.conv1.w", nn.normal_init(rng, (24, 6, 3, 3), 0.12))
    p.add("probe.conv1.b", np.zeros(24))
    p.add("probe.conv2.w", nn.normal_init(rng, (48, 24, 3, 3), 0.06))
    p.add("probe.conv2.b", np.zeros(48))
    p.add("probe.conv3.w", nn.normal_init(rng, (64, 48, 3, 3), 0.05))
    p.add("probe.conv3.b", np.zeros(64))
    p.add("probe.fc.w", nn.normal_init(rng, (64 * (RES // 4) ** 2, 128), 0.02))
    p.add("probe.fc.b", np.zeros(128))
    for head, classes in HEADS.items():
        p.add(f"probe.{head}.w", nn.normal_init(rng, (128, len(classes)), 0.05))
        p.add(f"probe.{head}.b", np.zeros(len(classes)))
    return p


def probe_logits(x, params: ParamSet) -> dict[str, ad.Tensor]:
    x = _recenter(np.asarray(x, dtype=np.float64))
    # frame channels are centered on the background level; diffs already are
    t = ad.constant(x - _CENTER)
    h = ad.gelu(nn.conv2d(t, params["probe.conv1.w"], params["probe.conv1.b"],
                          stride=1, padding=1))
    h = ad.gelu(nn.conv2d(h, params["probe.conv2.w"], params["probe.conv2.b"],
                          stride=2, padding=1))
    h = ad.gelu(nn.conv2d(h, params["probe.conv3.w"], params["probe.conv3.b"],
                          stride=2, padding=1))
    h = ad.reshape(h, (h.shape[0], -1))
    h = ad.gelu(nn.linear(h, params["probe.fc.w"], params["probe.fc.b"]))
    return {head: nn.linear(h, params[f"probe.{head}.w"], params[f"probe.{head}.b"])
            for head in HEADS}


def _logsumexp(logits: ad.Tensor) -> ad.Tensor:
    m = ad.constant(logits.data.max(axis=1, keepdims=True))
    return ad.add(ad.log(ad.sum_(ad.exp(ad.sub(logits, m)), axis=1, keepdims=True)), m)


def _ce(logits: ad.Tensor, targets: np.ndarray) -> ad.Tensor:
    b, c = logits.shape
    lse = _logsumexp(logits)
    picked = ad.take_flat(logits, np.arange(b) * c + targets, (b,))
    return ad.sub(ad.mean_(lse), ad.mean_(picked))


def _ce_uniform(logits: ad.Tensor) -> ad.Tensor:
    # cross-entropy against the uniform distribution, up to a constant
    return ad.sub(ad.mean_(_logsumexp(logits)), ad.mean_(logits))


@dataclass
class Probe:
    params: ParamSet
    accuracy: dict[str, float]
    classes: dict[str, tuple]
    seed: int

    def posteriors(self, items: np.ndarray) -> dict[str, np.ndarray]:
        with ad.no_grad():
            logits = probe_logits(items, self.params)
        out = {}
        for head, t in logits.items():
            z = t.data - t.data.max(axis=1, keepdims=True)
            e = np.exp(z)
            out[head] = e / e.sum(axis=1, keepdims=True)
        return out

    def save(self, dirpath) -> None:
        d = pathlib.Path(dirpath)
        d.mkdir(parents=True, exist_ok=True)
        save_params(self.params, d / "probe.params")
        meta = {"version": _MAGIC_VERSION, "seed": self.seed,
                "accuracy": self.accuracy,
                "classes": {k: list(v) for k, v in self.classes.items()}}
        (d / "probe.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, dirpath) -> "Probe":
        d = pathlib.Path(dirpath)
        meta = json.loads((d / "probe.json").read_text())
        if meta["version"] != _MAGIC_VERSION:
            raise ProbeError(f"probe version {meta['version']} not supported")
        acc = meta["accuracy"]
        bad = {h: a for h, a in acc.items() if a < GATE}
        if bad:
            raise ProbeError(f"probe unusable: held-out accuracy below {GATE}: {bad}")
        return cls(load_params(d / "probe.params"), acc,
                   {k: tuple(v) for k, v in meta["classes"].items()}, meta["seed"])


# few-class heads drift off uniform on junk inputs unless pushed harder
_NOISE_W = {"shape": 2.0, "color": 4.0, "style": 4.0, "identity": 2.0, "motion": 2.0}


def train_probe(corpus: ProbeCorpus, seed: int = 0, epochs: int = 30,
                batch_size: int = 128, lr: float = 3e-3,
                holdout_frac: float = 0.15) -> Probe:
    """Fit the probe and gate it on held-out accuracy; refuses to emit below GATE."""
    n = len(corpus.features)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_hold = int(round(n * holdout_frac))
    hold, train = order[:n_hold], order[n_hold:]

    params = _init_probe_params(seed)
    state = init_adam(params, lr=lr)
    for _ in range(epochs):
        perm = train[rng.permutation(len(train))]
        for lo in range(0, len(perm), batch_size):
            idx = perm[lo:lo + batch_size]
            x = corpus.features[idx]
            noise = corpus.noise[idx]
            clean = np.nonzero(~noise)[0]
            noisy = np.nonzero(noise)[0]

            def loss_fn(ps):
                logits = probe_logits(x, ps)
                terms = []
                for head in HEADS:
                    if len(clean):
                        t = corpus.labels[head][idx][clean]
                        terms.append(_ce(ad.gather_rows(logits[head], clean), t))
                    if len(noisy):
                        u = _ce_uniform(ad.gather_rows(logits[head], noisy))
                        terms.append(ad.mul(ad.constant(_NOISE_W[head]), u))
                total = terms[0]
                for t in terms[1:]:
                    total = ad.add(total, t)
                return total

            _, grads = value_and_grad(loss_fn, params)
            adam_step(params, grads, state)

    acc = _holdout_accuracy(params, corpus, hold)
    bad = {h: round(a, 4) for h, a in acc.items() if a < GATE}
    if bad:
        raise ProbeError(f"probe unusable: held-out accuracy below {GATE}: {bad}")
    return Probe(params, acc, dict(HEADS), seed)


def _holdout_accuracy(params: ParamSet, corpus: ProbeCorpus,
                      hold: np.ndarray) -> dict[str, float]:
    idx = hold[~corpus.noise[hold]]
    with ad.no_grad():
        logits = probe_logits(corpus.features[idx], params)
    return {head: float((logits[head].data.argmax(axis=1) ==
                         corpus.labels[head][idx]).mean())
            for head in HEADS}


# -- scoring --------------------------------------------------------------------------


def concept_target(concept: ConceptSpec, sense: str | None = None) -> tuple[str, str]:
    """Map a concept (and sense, for polysemous ones) to (head, class)."""
    if concept.kind == "polysemous":
        if sense == "A":
            return "style", "striped"
        if sense == "B":
            return "motion", concept.name
        raise WorldError(f"{concept.name!r} needs sense in {concept.senses}, got {sense!r}")
    if sense is not None:
        raise WorldError(f"{concept.name!r} is not polysemous; drop sense={sense!r}")
    if concept.kind == "object":
        return "shape", concept.name
    if concept.kind == "color":
        return "color", concept.name
    if concept.kind == "style":
        return "style", concept.name
    if concept.kind == "identity":
        return "identity", concept.name
    if concept.kind == "motion":
        return "motion", concept.name
    raise WorldError(f"unknown concept kind {concept.kind!r}")


def concept_score(frames: np.ndarray, concept: ConceptSpec, probe: Probe,
                  sense: str | None = None) -> float:
    """Mean probe posterior for the concept's class over the clip's items."""
    if not np.isfinite(frames).all():
        raise ProbeError("frames must be finite")
    head, cls = concept_target(concept, sense)
    if cls not in probe.classes[head]:
        raise ProbeError(f"probe has no class {cls!r} under head {head!r}")
    items = clip_items(frames)
    post = probe.posteriors(items)[head][:, probe.classes[head].index(cls)]
    # identical items (repeated-frame clips) score exactly like the single frame
    return float(post[0]) if np.ptp(post) == 0.0 else float(post.mean())
