"""The closed shape world: grammar, rasterizer, motion rules, few-shot sets."""

import numpy as np
import pytest

from unlearnlab import world as w
from unlearnlab.text import UNK, tokenize


@pytest.fixture(scope="module")
def g():
    return w.build_grammar()


def _mask_of(frame):
    return np.abs(frame - w._BG).max(axis=0) > 1e-9


def _centroid(frame):
    ys, xs = np.nonzero(_mask_of(frame))
    return ys.mean(), xs.mean()


class TestGrammar:
    def test_exactly_one_polysemous_concept(self, g):
        poly = [c for c in g.concepts.values() if c.kind == "polysemous"]
        assert len(poly) == 1 and poly[0].name == "drift"
        assert poly[0].senses == ("A", "B")

    def test_vocabulary_sorted_and_contiguous(self, g):
        words = g.vocab.tokens[4:]
        assert words == sorted(words)
        assert [g.vocab.id_of(t) for t in words] == list(range(4, len(g.vocab)))

    def test_every_concept_tokenizes_to_single_known_id(self, g):
        for name in g.concepts:
            p = tokenize(name, g.vocab)
            body = p.ids[p.mask][1:-1]          # strip BOS/EOS
            assert len(body) == 1 and body[0] != UNK

    def test_registry_covers_the_analog_table(self, g):
        kinds = {n: c.kind for n, c in g.concepts.items()}
        assert kinds["blob"] == "identity" and kinds["wisp"] == "identity"
        assert kinds["striped"] == "style"
        assert kinds["circle"] == "object" and kinds["ellipse"] == "object"
        assert g.similar == ("circle", "ellipse")

    def test_y_star_prompts(self, g):
        assert g.y_star("circle") == "circle"
        assert g.y_star("striped") == "striped square"
        assert g.y_star("left") == "square moving left"
        assert g.y_star("drift", "A") == "drift square"
        assert g.y_star("drift", "B") == "circle moving drift"
        with pytest.raises(w.WorldError):
            g.y_star("drift")               # sense required
        with pytest.raises(w.WorldError):
            g.y_star("circle", "A")         # sense forbidden
        with pytest.raises(w.WorldError):
            g.y_star("saxophone")

    def test_all_y_stars_tokenize_clean(self, g):
        for name, spec in g.concepts.items():
            senses = spec.senses or (None,)
            for s in senses:
                p = tokenize(g.y_star(name, s), g.vocab)
                assert UNK not in p.ids[p.mask]


class TestRenderImage:
    def test_deterministic(self):
        s = w.SceneSpec("triangle", "blue", "striped", motion="up")
        np.testing.assert_array_equal(w.render_image(s, seed=1), w.render_image(s, seed=9))

    def test_red_circle_center_pixel(self):
        img = w.render_image(w.SceneSpec("circle", "red", position=(8.0, 8.0)))
        r, gg, b = img[:, 8, 8]
        assert r > 0.8 and gg < 0.2 and b < 0.2

    def test_values_in_unit_range(self):
        for shape in ("circle", "square", "triangle", "ellipse", "blob", "wisp"):
            color = None if shape in ("blob", "wisp") else "green"
            img = w.render_image(w.SceneSpec(shape, color))
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_striped_fft_peak_at_stripe_frequency(self):
        """Stripe bands are 2 rows, so the period is 4 px -> bin RES/4."""
        st = w.render_image(w.SceneSpec("square", "green", "striped", position=(8.0, 8.0)))
        pl = w.render_image(w.SceneSpec("square", "green", "plain", position=(8.0, 8.0)))
        sig = (st[1] - pl[1]).mean(axis=1)       # style-only difference
        rows = _mask_of(pl).any(axis=1)
        sig = np.where(rows, sig - sig[rows].mean(), 0.0)
        mag = np.abs(np.fft.rfft(sig))
        assert 1 + int(np.argmax(mag[1:])) == w.RES // (2 * w._STRIPE_H)

    def test_drift_style_renders_as_stripes(self):
        a = w.render_image(w.SceneSpec("square", "red", "drift", position=(8.0, 8.0)))
        b = w.render_image(w.SceneSpec("square", "red", "striped", position=(8.0, 8.0)))
        np.testing.assert_array_equal(a, b)

    def test_blob_fixed_green_and_distinct_from_wisp(self):
        blob = w.render_image(w.SceneSpec("blob", position=(8.0, 8.0)))
        wisp = w.render_image(w.SceneSpec("wisp", position=(8.0, 8.0)))
        assert blob[1, 8, 8] > 0.8 and blob[0, 8, 8] < 0.2
        assert wisp[2, 8, 8] > 0.8
        assert np.abs(blob - wisp).max() > 0.3

    def test_motion_still_has_directional_trail(self):
        img = w.render_image(w.SceneSpec("circle", "red", motion="right"))
        red = img[0] - w._BG
        cx, _ = w.motion_position("right", None, len(w._TRAIL_ALPHA))
        lo, hi = int(cx - 3.5), int(cx + 3.5) + 1   # columns the object occupies
        left_mass = red[:, :lo].sum()
        right_mass = red[:, hi:].sum()
        assert left_mass > 0.5 and right_mass == 0.0

    def test_invalid_scenes_rejected(self):
        for s in (w.SceneSpec("hexagon", "red"),
                  w.SceneSpec("circle", "cyan"),
                  w.SceneSpec("circle", "red", "dotted"),
                  w.SceneSpec("circle", "red", motion="down"),
                  w.SceneSpec("blob", "red"),
                  w.SceneSpec("blob", style="striped"),
                  w.SceneSpec("circle", "red", position=(20.0, 8.0)),
                  w.SceneSpec("circle", "red", frames=0)):
            with pytest.raises(w.WorldError):
                w.render_image(s)


class TestRenderVideo:
    def test_right_motion_centroid_strictly_increases(self):
        v = w.render_video(w.SceneSpec("circle", "blue", motion="right", frames=8))
        xs = [_centroid(fr)[1] for fr in v]
        assert all(b > a for a, b in zip(xs, xs[1:]))

    def test_up_motion_centroid_strictly_decreases(self):
        v = w.render_video(w.SceneSpec("square", "red", motion="up", frames=8))
        ys = [_centroid(fr)[0] for fr in v]
        assert all(b < a for a, b in zip(ys, ys[1:]))

    def test_single_frame_equals_initial_still(self):
        s = w.SceneSpec("triangle", "green", "striped")
        v = w.render_video(s, frames=1)
        np.testing.assert_array_equal(v[0], w.render_image(s))

    def test_single_frame_of_motion_scene_equals_initial_pose(self):
        s = w.SceneSpec("circle", "red", motion="right")
        v = w.render_video(s, frames=1)
        pos = w.motion_position("right", None, 0)
        still = w.render_image(w.SceneSpec("circle", "red", position=pos))
        np.testing.assert_array_equal(v[0], still)

    def test_bounce_reverses_at_closed_form_frame(self):
        (cx0, cy0), (_, vy) = w._MOTION_RULES["bounce"]
        flip = int(np.floor((w._CENTER_HI - cy0) / vy))   # last frame moving down
        v = w.render_video(w.SceneSpec("square", "red", motion="bounce", frames=8))
        ys = [_centroid(fr)[0] for fr in v]
        for i in range(len(ys) - 1):
            if i < flip:
                assert ys[i + 1] > ys[i]
            elif i > flip:
                assert ys[i + 1] < ys[i]

    def test_static_scene_gives_identical_frames(self):
        v = w.render_video(w.SceneSpec("ellipse", "green", frames=5))
        for i in range(1, 5):
            np.testing.assert_array_equal(v[i], v[0])

    def test_deterministic(self):
        s = w.SceneSpec("blob", motion="drift", frames=6)
        np.testing.assert_array_equal(w.render_video(s), w.render_video(s))


class TestCorpora:
    def test_every_prompt_tokenizes_without_unk(self, g):
        items = w.build_image_corpus(g, 300, seed=1) + w.build_video_corpus(g, 60, seed=2)
        for it in items:
            p = tokenize(it.prompt, g.vocab)
            assert UNK not in p.ids[p.mask], it.prompt

    def test_corpus_deterministic(self, g):
        a = w.build_image_corpus(g, 40, seed=9)
        b = w.build_image_corpus(g, 40, seed=9)
        assert [x.prompt for x in a] == [x.prompt for x in b]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.data, y.data)

    def test_corpus_covers_all_concept_kinds(self, g):
        items = w.build_image_corpus(g, 400, seed=3)
        text = " ".join(it.prompt for it in items)
        for word in ("circle", "square", "triangle", "ellipse", "striped",
                     "blob", "wisp", "drift", "moving"):
            assert word in text, word

    def test_manifest_hashes_track_content(self, g):
        items = w.build_image_corpus(g, 5, seed=4)
        m1 = w.corpus_manifest(items)
        m2 = w.corpus_manifest(w.build_image_corpus(g, 5, seed=4))
        assert m1 == m2 and m1["count"] == 5
        other = w.corpus_manifest(w.build_image_corpus(g, 5, seed=5))
        assert other != m1

    def test_video_corpus_shapes(self, g):
        items = w.build_video_corpus(g, 10, seed=6, frames=4)
        for it in items:
            assert it.data.shape == (4, 3, w.RES, w.RES)


class TestMakeFewshot:
    def test_k_zero_is_valid_and_empty(self, g):
        fs = w.make_fewshot("circle", 0, "rendered", seed=0, grammar=g)
        assert fs.k == 0 and fs.images.shape == (0, 3, w.RES, w.RES)
        assert fs.prompt == "circle"

    def test_negative_k_rejected(self, g):
        with pytest.raises(w.WorldError):
            w.make_fewshot("circle", -1, "rendered", grammar=g)

    def test_sense_validation(self, g):
        with pytest.raises(w.WorldError):
            w.make_fewshot("drift", 4, "rendered", grammar=g)          # missing
        with pytest.raises(w.WorldError):
            w.make_fewshot("drift", 4, "rendered", sense="C", grammar=g)
        with pytest.raises(w.WorldError):
            w.make_fewshot("circle", 4, "rendered", sense="A", grammar=g)

    def test_unknown_source_rejected(self, g):
        with pytest.raises(w.WorldError):
            w.make_fewshot("circle", 2, "photographed", grammar=g)

    def test_rendered_circles_vary_nonconcept_attributes(self, g):
        fs = w.make_fewshot("circle", 4, "rendered", seed=7, grammar=g)
        assert fs.images.shape == (4, 3, w.RES, w.RES)
        assert fs.provenance == "rendered"
        diffs = [np.abs(fs.images[i] - fs.images[0]).max() for i in range(1, 4)]
        assert max(diffs) > 0.1     # color/position vary across the set

    def test_model_generated_requires_sampler(self, g):
        with pytest.raises(w.WorldError):
            w.make_fewshot("circle", 2, "model_generated", grammar=g)

    def test_model_generated_uses_sampler_and_clips(self, g):
        calls = []

        def sampler(prompt, seed):
            calls.append((prompt, seed))
            return np.full((3, w.RES, w.RES), 1.7)   # out of range on purpose

        fs = w.make_fewshot("striped", 2, "model_generated", seed=1,
                            grammar=g, sampler=sampler)
        assert len(calls) == 2 and all(p == "striped square" for p, _ in calls)
        assert fs.images.max() <= 1.0

    def test_sense_a_images_are_striped_textures_without_motion(self, g):
        fs = w.make_fewshot("drift", 4, "rendered", seed=3, sense="A", grammar=g)
        assert fs.prompt == "drift square"
        for img in fs.images:
            chan = img[np.argmax(np.abs(img - w._BG).max(axis=(1, 2)))]
            vals = chan[_mask_of(img)]
            assert vals.max() - vals.min() > 0.2    # bright/dim stripe bands

    def test_deterministic_under_seed(self, g):
        a = w.make_fewshot("blob", 4, "rendered", seed=11, grammar=g)
        b = w.make_fewshot("blob", 4, "rendered", seed=11, grammar=g)
        np.testing.assert_array_equal(a.images, b.images)
