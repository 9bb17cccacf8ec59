"""Deterministic synthetic shape world: grammar, rasterizer, corpora, few-shot sets.

The world is closed: every prompt the corpus or harness can emit tokenizes
without UNK against the grammar vocabulary. Rendering is pure numpy with
anti-aliasing off, so identical scenes produce bitwise-identical images.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .text import Vocabulary, tokenize

RES = 16
FRAMES = 8
_BG = 0.45
_DIM = 0.30          # intensity factor inside the dark stripe bands
_STRIPE_H = 2        # rows per band; full period is 4 rows
_TRAIL_ALPHA = (0.45, 0.22)

COLORS = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.82, 0.18),
    "blue": (0.15, 0.25, 0.90),
}
SHAPES = ("circle", "square", "triangle")
STYLES = ("plain", "striped")
MOTIONS = ("left", "right", "up", "bounce")
IDENTITY_COLOR = {"blob": "green", "wisp": "blue"}

# per-frame velocity and a start position that keeps the object in frame
_MOTION_RULES = {
    "left": ((11.5, 8.0), (-1.0, 0.0)),
    "right": ((4.5, 8.0), (1.0, 0.0)),
    "up": ((8.0, 11.5), (0.0, -1.0)),
    "bounce": ((8.0, 5.5), (0.0, 2.0)),
    "drift": ((4.5, 4.5), (1.0, 1.0)),
}
_CENTER_LO, _CENTER_HI = 4.0, 12.0


class WorldError(ValueError):
    """A scene or concept request that falls outside the closed world."""


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    kind: str                       # object | style | identity | motion | polysemous
    senses: tuple[str, ...] = ()    # exactly two labels for polysemous concepts

    def __post_init__(self):
        if self.kind == "polysemous" and len(self.senses) != 2:
            raise WorldError(f"polysemous concept {self.name!r} needs exactly 2 senses")
        if self.kind != "polysemous" and self.senses:
            raise WorldError(f"{self.name!r} is not polysemous but has senses")


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str | None = None        # None for identities (fixed palette)
    style: str = "plain"            # plain | striped | drift (sense A == stripes)
    motion: str | None = None
    position: tuple[float, float] | None = None   # None = motion-rule default
    frames: int = 1


@dataclass(frozen=True)
class FewShotSet:
    images: np.ndarray              # (k, 3, RES, RES) in [0, 1]
    prompt: str                     # y*, the concept prompt driving the ascent
    provenance: str                 # rendered | model_generated
    concept: str
    sense: str | None = None

    @property
    def k(self) -> int:
        return int(self.images.shape[0])


@dataclass(frozen=True)
class Grammar:
    vocab: Vocabulary
    concepts: dict[str, ConceptSpec]
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(sorted(COLORS))
    styles: tuple[str, ...] = STYLES
    motions: tuple[str, ...] = MOTIONS
    similar: tuple[str, str] = ("circle", "ellipse")
    identities: tuple[str, ...] = ("blob", "wisp")
    polysemous: str = "drift"

    def concept(self, name: str) -> ConceptSpec:
        if name not in self.concepts:
            raise WorldError(f"unknown concept {name!r}")
        return self.concepts[name]

    def y_star(self, name: str, sense: str | None = None) -> str:
        """Canonical unlearning prompt for a concept (sense picks the reading)."""
        spec = self.concept(name)
        if spec.kind == "polysemous":
            if sense not in spec.senses:
                raise WorldError(f"concept {name!r} needs sense in {spec.senses}, got {sense!r}")
            return f"{name} square" if sense == "A" else f"circle moving {name}"
        if sense is not None:
            raise WorldError(f"concept {name!r} is not polysemous; drop sense={sense!r}")
        if spec.kind == "motion":
            return f"square moving {name}"
        if spec.kind == "style":
            return f"{name} square"        # style concepts ride a carrier noun
        return name


def build_grammar() -> Grammar:
    concepts = {}
    for s in SHAPES + ("ellipse",):
        concepts[s] = ConceptSpec(s, "object")
    for c in sorted(COLORS):
        concepts[c] = ConceptSpec(c, "color")
    concepts["striped"] = ConceptSpec("striped", "style")
    for ident in ("blob", "wisp"):
        concepts[ident] = ConceptSpec(ident, "identity")
    for m in MOTIONS:
        concepts[m] = ConceptSpec(m, "motion")
    concepts["drift"] = ConceptSpec("drift", "polysemous", senses=("A", "B"))
    words = set(concepts) | set(COLORS) | {"plain", "moving", "square", "ellipse"}
    return Grammar(vocab=Vocabulary(sorted(words)), concepts=concepts)


# -- rasterizer -----------------------------------------------------------------


def _shape_mask(shape: str, cx: float, cy: float, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= 3.5 ** 2
    if shape == "ellipse":
        return ((xx - cx) / 5.0) ** 2 + ((yy - cy) / 2.2) ** 2 <= 1.0
    if shape == "square":
        return (np.abs(xx - cx) <= 3.0) & (np.abs(yy - cy) <= 3.0)
    if shape == "triangle":
        half_w = (yy - (cy - 3.2)) * (3.8 / 6.4)
        return (yy >= cy - 3.2) & (yy <= cy + 3.2) & (np.abs(xx - cx) <= half_w)
    if shape in ("blob", "wisp"):
        th = np.arctan2(yy - cy, xx - cx)
        rr = np.hypot(xx - cx, yy - cy)
        if shape == "blob":
            return rr <= 3.1 + 0.9 * np.sin(3 * th + 0.7) + 0.5 * np.cos(5 * th)
        return rr <= 2.9 + 1.1 * np.sin(2 * th + 1.9) + 0.6 * np.sin(7 * th + 0.5)
    raise WorldError(f"unknown shape {shape!r}")


def _stripe_factor(cy: float, res: int) -> np.ndarray:
    yy = np.arange(res)[:, None] + 0.5
    band = (np.floor(yy - cy) // _STRIPE_H) % 2 == 0
    return np.where(band, 1.0, _DIM) * np.ones((res, res))


def _paint(img: np.ndarray, mask: np.ndarray, rgb, factor: np.ndarray, alpha: float):
    for ch in range(3):
        tgt = _BG + factor * (rgb[ch] - _BG)
        img[ch][mask] = (1 - alpha) * img[ch][mask] + alpha * tgt[mask]


def _reflect(p: float, lo: float = _CENTER_LO, hi: float = _CENTER_HI) -> float:
    span, period = hi - lo, 2 * (hi - lo)
    q = (p - lo) % period
    return lo + (q if q <= span else period - q)


def motion_position(motion: str | None, start: tuple[float, float] | None,
                    i: int) -> tuple[float, float]:
    """Object center at frame i under the (deterministic) motion rule."""
    if motion is None:
        return start if start is not None else (8.0, 8.0)
    if motion not in _MOTION_RULES:
        raise WorldError(f"unknown motion {motion!r}")
    default, (dx, dy) = _MOTION_RULES[motion]
    cx0, cy0 = start if start is not None else default
    return _reflect(cx0 + dx * i), _reflect(cy0 + dy * i)


def _validate(scene: SceneSpec):
    known = set(SHAPES) | {"ellipse", "blob", "wisp"}
    if scene.shape not in known:
        raise WorldError(f"unknown shape {scene.shape!r}")
    if scene.shape in IDENTITY_COLOR:
        if scene.color not in (None, IDENTITY_COLOR[scene.shape]):
            raise WorldError(f"{scene.shape!r} has a fixed color; got {scene.color!r}")
        if scene.style != "plain":
            raise WorldError(f"identity {scene.shape!r} cannot be styled")
    elif scene.color is not None and scene.color not in COLORS:
        raise WorldError(f"unknown color {scene.color!r}")
    if scene.style not in ("plain", "striped", "drift"):
        raise WorldError(f"unknown style {scene.style!r}")
    if scene.motion is not None and scene.motion not in _MOTION_RULES:
        raise WorldError(f"unknown motion {scene.motion!r}")
    if scene.frames < 1:
        raise WorldError("frames must be >= 1")
    if scene.position is not None:
        cx, cy = scene.position
        if not (0 <= cx < RES and 0 <= cy < RES):
            raise WorldError(f"position {scene.position} outside the canvas")


def _scene_rgb(scene: SceneSpec):
    color = scene.color or IDENTITY_COLOR.get(scene.shape) or "red"
    return COLORS[color]


def _render_frame(scene: SceneSpec, pos: tuple[float, float], res: int,
                  ghosts: list[tuple[tuple[float, float], float]] = ()) -> np.ndarray:
    img = np.full((3, res, res), _BG)
    rgb = _scene_rgb(scene)
    striped = scene.style in ("striped", "drift")
    for (gx, gy), alpha in ghosts:
        fac = _stripe_factor(gy, res) if striped else np.ones((res, res))
        _paint(img, _shape_mask(scene.shape, gx, gy, res), rgb, fac, alpha)
    fac = _stripe_factor(pos[1], res) if striped else np.ones((res, res))
    _paint(img, _shape_mask(scene.shape, pos[0], pos[1], res), rgb, fac, 1.0)
    return img


def render_image(scene: SceneSpec, seed: int = 0, res: int = RES) -> np.ndarray:
    """Rasterize a still. Motion scenes show the pose two steps into the rule
    plus fading ghosts at the two prior poses, so direction reads off a still.

    The seed is accepted for API symmetry but rasterization is a pure function
    of the scene, so it never influences the pixels.
    """
    _validate(scene)
    if scene.motion is None:
        return _render_frame(scene, motion_position(None, scene.position, 0), res)
    ref = len(_TRAIL_ALPHA)
    pos = motion_position(scene.motion, scene.position, ref)
    # farthest ghost first so nearer (stronger) ghosts paint over it
    ghosts = [(motion_position(scene.motion, scene.position, ref - lag), alpha)
              for lag, alpha in sorted(enumerate(_TRAIL_ALPHA, start=1), reverse=True)]
    return _render_frame(scene, pos, res, ghosts)


def render_video(scene: SceneSpec, frames: int | None = None, seed: int = 0,
                 res: int = RES) -> np.ndarray:
    """Rasterize F frames, advancing the object by the motion rule each frame."""
    _validate(scene)
    f = scene.frames if frames is None else int(frames)
    if f < 1:
        raise WorldError("frames must be >= 1")
    out = np.empty((f, 3, res, res))
    for i in range(f):
        pos = motion_position(scene.motion, scene.position, i)
        out[i] = _render_frame(scene, pos, res)
    return out


def scene_prompt(scene: SceneSpec, with_color: bool = True) -> str:
    """The grammar sentence describing a scene (articles-free toy grammar)."""
    if scene.shape in IDENTITY_COLOR:
        words = [scene.shape]
    else:
        words = []
        if scene.style != "plain":
            words.append(scene.style)
        if with_color and scene.color is not None:
            words.append(scene.color)
        words.append(scene.shape)
    if scene.motion is not None:
        words += ["moving", scene.motion]
    return " ".join(words)


# -- corpora ----------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusItem:
    prompt: str
    data: np.ndarray                # (3,R,R) image or (F,3,R,R) video
    scene: SceneSpec


_GRID = (6.5, 8.0, 9.5)


def _jitter(rng: np.random.Generator) -> tuple[float, float]:
    # a coarse placement grid: enough variety to forbid position shortcuts,
    # few enough modes that a small generative model can cover all of them
    return (_GRID[rng.integers(3)], _GRID[rng.integers(3)])


def motion_start(motion: str, rng: np.random.Generator) -> tuple[float, float]:
    """Sample a start holding enough travel-axis headroom for FRAMES steps.

    Directional motions must not reflect mid-clip (a reflected "left" clip
    moves right, poisoning anything that learns from per-frame differences),
    so only the orthogonal coordinate gets the full jitter range. Bounce is
    reflection by definition and drift stays diagonal when it reflects, so
    both jitter freely.
    """
    if motion not in _MOTION_RULES:
        raise WorldError(f"unknown motion {motion!r}")
    wide = np.round(rng.uniform(5.5, 10.5, size=2), 1)
    snug = float(np.round(rng.uniform(11.0, 11.5), 1))
    if motion == "left":
        return (snug, wide[1])
    if motion == "right":
        return (float(np.round(16.0 - snug, 1)), wide[1])
    if motion == "up":
        return (wide[0], snug)
    return tuple(wide)


def _sample_still(g: Grammar, rng: np.random.Generator) -> SceneSpec:
    shape = g.shapes[rng.integers(len(g.shapes))] if rng.random() < 0.85 else "ellipse"
    color = g.colors[rng.integers(3)]
    style = ("plain", "striped", "drift")[rng.choice(3, p=[0.55, 0.27, 0.18])]
    return SceneSpec(shape, color, style, position=_jitter(rng))


def sample_image_scene(g: Grammar, rng: np.random.Generator) -> tuple[SceneSpec, str]:
    u = rng.random()
    if u < 0.52:                      # fully specified still
        return (s := _sample_still(g, rng)), scene_prompt(s)
    if u < 0.67:                      # motion trail still
        shape = g.shapes[rng.integers(len(g.shapes))]
        motion = ("left", "right", "up", "bounce", "drift")[rng.integers(5)]
        s = SceneSpec(shape, g.colors[rng.integers(3)], "plain", motion=motion)
        return s, scene_prompt(s)
    if u < 0.80:                      # identity still (fixed appearance)
        ident = g.identities[rng.integers(2)]
        s = SceneSpec(ident, position=_jitter(rng))
        return s, scene_prompt(s)
    if u < 0.92:                      # colorless partial prompt
        s = _sample_still(g, rng)
        return s, scene_prompt(s, with_color=False)
    # bare concept word over a representative scene
    pick = rng.integers(6)
    if pick < 3:
        shape = ("circle", "square", "triangle")[pick]
        return SceneSpec(shape, g.colors[rng.integers(3)], position=_jitter(rng)), shape
    if pick == 3:
        s = SceneSpec("ellipse", g.colors[rng.integers(3)], position=_jitter(rng))
        return s, "ellipse"
    if pick == 4:
        carrier = g.shapes[rng.integers(len(g.shapes))]
        s = SceneSpec(carrier, g.colors[rng.integers(3)], "striped", position=_jitter(rng))
        return s, "striped"
    s = SceneSpec(g.shapes[rng.integers(len(g.shapes))], g.colors[rng.integers(3)],
                  "drift", position=_jitter(rng))
    return s, "drift square" if s.shape == "square" else scene_prompt(s)


def sample_video_scene(g: Grammar, rng: np.random.Generator,
                       frames: int = FRAMES) -> tuple[SceneSpec, str]:
    u = rng.random()
    if u < 0.62:                      # moving colored shape
        shape = g.shapes[rng.integers(len(g.shapes))] if rng.random() < 0.88 else "ellipse"
        motion = ("left", "right", "up", "bounce", "drift")[rng.integers(5)]
        style = "striped" if rng.random() < 0.22 else "plain"
        s = SceneSpec(shape, g.colors[rng.integers(3)], style, motion=motion, frames=frames)
        return s, scene_prompt(s)
    if u < 0.78:                      # static clip
        s = replace(_sample_still(g, rng), frames=frames)
        return s, scene_prompt(s)
    if u < 0.92:                      # identity on the move
        ident = g.identities[rng.integers(2)]
        motion = ("left", "right", "up", "bounce", "drift")[rng.integers(5)]
        s = SceneSpec(ident, motion=motion, frames=frames)
        return s, scene_prompt(s)
    s = replace(_sample_still(g, rng), frames=frames)   # colorless static clip
    return s, scene_prompt(s, with_color=False)


def build_image_corpus(g: Grammar, n: int, seed: int) -> list[CorpusItem]:
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        scene, prompt = sample_image_scene(g, rng)
        items.append(CorpusItem(prompt, render_image(scene), scene))
    return items


def build_video_corpus(g: Grammar, n: int, seed: int,
                       frames: int = FRAMES) -> list[CorpusItem]:
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        scene, prompt = sample_video_scene(g, rng, frames)
        items.append(CorpusItem(prompt, render_video(scene), scene))
    return items


def corpus_manifest(items: list[CorpusItem]) -> dict:
    rows = []
    for it in items:
        rows.append({
            "prompt": it.prompt,
            "scene": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in vars(it.scene).items()},
            "sha256": hashlib.sha256(
                np.ascontiguousarray(it.data).tobytes()).hexdigest(),
        })
    return {"version": 1, "count": len(rows), "items": rows}


# -- few-shot unlearning sets ------------------------------------------------------


def _fewshot_scene(g: Grammar, spec: ConceptSpec, sense: str | None,
                   rng: np.random.Generator) -> SceneSpec:
    color = g.colors[rng.integers(3)]
    pos = _jitter(rng)
    if spec.kind == "object":
        return SceneSpec(spec.name, color, position=pos)
    if spec.kind == "color":
        return SceneSpec(g.shapes[rng.integers(len(g.shapes))], spec.name, position=pos)
    if spec.kind == "style":
        return SceneSpec(g.shapes[rng.integers(len(g.shapes))], color, spec.name,
                         position=pos)
    if spec.kind == "identity":
        return SceneSpec(spec.name, position=pos)
    if spec.kind == "motion":
        return SceneSpec("square", color, motion=spec.name)
    if sense == "A":     # drift as texture, square carrier
        return SceneSpec("square", color, "drift", position=pos)
    return SceneSpec("circle", color, motion="drift")   # sense B: diagonal trail


def make_fewshot(concept: ConceptSpec | str, k: int, source: str = "rendered",
                 seed: int = 0, sense: str | None = None, grammar: Grammar | None = None,
                 sampler=None) -> FewShotSet:
    """Build the k-image set x* plus its prompt y* for one concept.

    ``sampler(prompt, seed) -> image`` must be supplied for model_generated
    provenance; the pipeline wires in the trained image model there.
    """
    g = grammar or build_grammar()
    spec = g.concept(concept if isinstance(concept, str) else concept.name)
    if k < 0:
        raise WorldError(f"k must be >= 0, got {k}")
    if spec.kind == "polysemous":
        if sense not in spec.senses:
            raise WorldError(f"{spec.name!r} needs sense in {spec.senses}, got {sense!r}")
    elif sense is not None:
        raise WorldError(f"{spec.name!r} is not polysemous; drop sense={sense!r}")
    if source not in ("rendered", "model_generated"):
        raise WorldError(f"unknown few-shot source {source!r}")
    prompt = g.y_star(spec.name, sense)
    rng = np.random.default_rng(seed)
    images = np.zeros((k, 3, RES, RES))
    for i in range(k):
        if source == "rendered":
            images[i] = render_image(_fewshot_scene(g, spec, sense, rng))
        else:
            if sampler is None:
                raise WorldError("model_generated few-shot sets need a trained "
                                 "image model sampler")
            images[i] = np.clip(sampler(prompt, int(rng.integers(2 ** 31))), 0.0, 1.0)
    if not np.isfinite(images).all():
        raise WorldError("few-shot images must be finite")
    return FewShotSet(images, prompt, source, spec.name, sense)
