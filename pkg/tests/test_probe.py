"""Probe: feature construction, the held-out gate, and concept scoring."""

import json

import numpy as np
import pytest

from unlearnlab import probe as P
from unlearnlab.probe import (GATE, HEADS, Probe, ProbeCorpus, ProbeError,
                              build_probe_corpus, clip_items, concept_score,
                              concept_target, train_probe)
from unlearnlab.world import SceneSpec, WorldError, render_image, render_video


class TestClipItems:
    def test_still_becomes_one_item_with_zero_diff(self):
        img = render_image(SceneSpec("circle", "red", position=(7.0, 9.0)))
        items = clip_items(img)
        assert items.shape == (1, 6, 16, 16)
        assert np.array_equal(items[0, :3], img)
        assert not items[0, 3:].any()

    def test_clip_items_are_frame_plus_forward_diff(self):
        vid = render_video(SceneSpec("square", "blue", motion="right", frames=5))
        items = clip_items(vid)
        assert items.shape == (4, 6, 16, 16)
        assert np.array_equal(items[2, :3], vid[2])
        assert np.array_equal(items[2, 3:], vid[3] - vid[2])

    def test_single_frame_clip_equals_still(self):
        img = render_image(SceneSpec("triangle", "green", position=(8.5, 6.5)))
        assert np.array_equal(clip_items(img[None]), clip_items(img))

    def test_bad_rank_rejected(self):
        with pytest.raises(ProbeError, match="still or a clip"):
            clip_items(np.zeros((16, 16)))


class TestRecenter:
    def test_centroid_lands_near_grid_center(self):
        img = render_image(SceneSpec("circle", "red", position=(5.7, 10.2)))
        out = P._recenter(clip_items(img))
        w = np.abs(out[0, :3] - 0.45).sum(axis=0)
        yy, xx = np.mgrid[0:16, 0:16]
        cy = (w * yy).sum() / w.sum()
        cx = (w * xx).sum() / w.sum()
        assert abs(cy - 7.5) < 0.75 and abs(cx - 7.5) < 0.75

    def test_blank_input_unchanged(self):
        blank = np.full((1, 6, 16, 16), 0.45)
        blank[:, 3:] = 0.0
        assert np.array_equal(P._recenter(blank), blank)

    def test_diff_channels_roll_with_the_frame(self):
        vid = render_video(SceneSpec("square", "red", motion="left", frames=3))
        items = clip_items(vid)
        out = P._recenter(items)
        # the same nonzero diff mass is present, just translated
        assert np.isclose(np.abs(out[0, 3:]).sum(), np.abs(items[0, 3:]).sum())


class TestCorpus:
    def test_shapes_and_noise_fraction(self, probe_corpus):
        n = len(probe_corpus.features)
        assert probe_corpus.features.shape[1:] == (6, 16, 16)
        n_noise = int(probe_corpus.noise.sum())
        n_clean = n - n_noise
        assert n_noise == 3 * (n_clean // 12)
        for head in HEADS:
            lab = probe_corpus.labels[head]
            assert lab.shape == (n,)
            assert (lab[probe_corpus.noise] == -1).all()
            assert lab[~probe_corpus.noise].min() >= 0

    def test_every_class_of_every_head_appears(self, probe_corpus):
        for head, classes in HEADS.items():
            seen = set(probe_corpus.labels[head][~probe_corpus.noise])
            assert seen == set(range(len(classes))), head

    def test_deterministic(self, grammar, probe_corpus):
        again = build_probe_corpus(grammar, seed=0)
        assert np.array_equal(again.features, probe_corpus.features)
        for head in HEADS:
            assert np.array_equal(again.labels[head], probe_corpus.labels[head])


class TestGate:
    def test_trained_probe_clears_gate_on_every_head(self, trained_probe):
        for head, acc in trained_probe.accuracy.items():
            assert acc >= GATE, (head, acc)

    def test_untrained_probe_is_refused(self, probe_corpus):
        with pytest.raises(ProbeError, match="below"):
            train_probe(probe_corpus, seed=0, epochs=0)

    def test_permuted_labels_fail_the_gate(self, probe_corpus):
        rng = np.random.default_rng(5)
        labels = {h: v.copy() for h, v in probe_corpus.labels.items()}
        clean = ~probe_corpus.noise
        for head in HEADS:
            vals = labels[head][clean]
            labels[head][clean] = vals[rng.permutation(len(vals))]
        shuffled = ProbeCorpus(probe_corpus.features, labels, probe_corpus.noise)
        with pytest.raises(ProbeError) as err:
            train_probe(shuffled, seed=0, epochs=2)
        assert "shape" in str(err.value) and "motion" in str(err.value)


class TestNoiseReadback:
    def test_uniform_noise_posteriors_stay_indecisive(self, trained_probe):
        rng = np.random.default_rng(123)
        items = np.stack([np.concatenate([rng.random((3, 16, 16)),
                                          np.zeros((3, 16, 16))])
                          for _ in range(32)])
        posts = trained_probe.posteriors(items)
        for head, p in posts.items():
            assert p.max() < 0.6, (head, float(p.max()))


class TestConceptTarget:
    def test_mapping_per_kind(self, grammar):
        assert concept_target(grammar.concept("circle")) == ("shape", "circle")
        assert concept_target(grammar.concept("striped")) == ("style", "striped")
        assert concept_target(grammar.concept("blob")) == ("identity", "blob")
        assert concept_target(grammar.concept("left")) == ("motion", "left")

    def test_polysemous_needs_a_sense(self, grammar):
        drift = grammar.concept("drift")
        assert concept_target(drift, "A") == ("style", "striped")
        assert concept_target(drift, "B") == ("motion", "drift")
        with pytest.raises(WorldError, match="sense"):
            concept_target(drift)

    def test_sense_on_plain_concept_rejected(self, grammar):
        with pytest.raises(WorldError, match="not polysemous"):
            concept_target(grammar.concept("circle"), "A")


class TestConceptScore:
    def test_positive_and_negative_controls(self, grammar, trained_probe):
        circle = grammar.concept("circle")
        pos = render_image(SceneSpec("circle", "red", position=(7.3, 9.1)))
        neg = render_image(SceneSpec("square", "blue", position=(7.3, 9.1)))
        assert concept_score(pos, circle, trained_probe) > 0.9
        assert concept_score(neg, circle, trained_probe) < 0.1

    def test_motion_scored_from_clips(self, grammar, trained_probe):
        left = grammar.concept("left")
        vid = render_video(SceneSpec("square", "green", motion="left", frames=8))
        still = render_video(SceneSpec("square", "green", position=(8.0, 8.0),
                                       frames=8))
        assert concept_score(vid, left, trained_probe) > 0.9
        assert concept_score(still, left, trained_probe) < 0.1

    def test_repeated_frame_clip_matches_the_still(self, grammar, trained_probe):
        circle = grammar.concept("circle")
        img = render_image(SceneSpec("circle", "green", position=(6.4, 8.8)))
        clip = np.repeat(img[None], 4, axis=0)
        a = concept_score(img, circle, trained_probe)
        b = concept_score(clip, circle, trained_probe)
        assert abs(a - b) < 1e-9

    def test_nonfinite_frames_rejected(self, grammar, trained_probe):
        img = render_image(SceneSpec("circle", "red", position=(8.0, 8.0)))
        img[0, 0, 0] = np.nan
        with pytest.raises(ProbeError, match="finite"):
            concept_score(img, grammar.concept("circle"), trained_probe)

    def test_polysemous_sense_routes_to_different_heads(self, grammar, trained_probe):
        drift = grammar.concept("drift")
        textured = render_image(SceneSpec("square", "red", "drift",
                                          position=(7.5, 8.5)))
        moving = render_video(SceneSpec("circle", "blue", motion="drift", frames=8))
        assert concept_score(textured, drift, trained_probe, sense="A") > 0.8
        assert concept_score(moving, drift, trained_probe, sense="B") > 0.8
        assert concept_score(textured, drift, trained_probe, sense="B") < 0.2


class TestSaveLoad:
    def test_round_trip_preserves_scores(self, trained_probe, tmp_path):
        trained_probe.save(tmp_path / "probe")
        again = Probe.load(tmp_path / "probe")
        assert again.accuracy == trained_probe.accuracy
        assert again.classes == trained_probe.classes
        img = render_image(SceneSpec("triangle", "blue", position=(9.0, 7.0)))
        a = trained_probe.posteriors(clip_items(img))
        b = again.posteriors(clip_items(img))
        for head in HEADS:
            assert np.array_equal(a[head], b[head])

    def test_load_rechecks_the_gate(self, trained_probe, tmp_path):
        trained_probe.save(tmp_path / "probe")
        meta_path = tmp_path / "probe" / "probe.json"
        meta = json.loads(meta_path.read_text())
        meta["accuracy"]["shape"] = 0.5
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ProbeError, match="below"):
            Probe.load(tmp_path / "probe")

    def test_unknown_version_rejected(self, trained_probe, tmp_path):
        trained_probe.save(tmp_path / "probe")
        meta_path = tmp_path / "probe" / "probe.json"
        meta = json.loads(meta_path.read_text())
        meta["version"] = 99
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ProbeError, match="version"):
            Probe.load(tmp_path / "probe")
