"""Tokenizer rules and text-encoder properties (determinism, masking, gradients)."""

import json

import numpy as np
import pytest

from unlearnlab import autodiff as ad
from unlearnlab import text as tx
from unlearnlab.params import ParamSet, grad


WORDS = ["a", "red", "green", "blue", "circle", "square", "triangle", "moving"]


@pytest.fixture(scope="module")
def vocab():
    return tx.Vocabulary(WORDS)


@pytest.fixture(scope="module")
def enc_params(vocab):
    return tx.init_text_encoder(len(vocab), d_model=16, n_blocks=2, n_heads=4,
                                max_len=8, seed=1)


class TestVocabulary:
    def test_reserved_ids(self, vocab):
        assert vocab.tokens[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
        assert (tx.PAD, tx.UNK, tx.BOS, tx.EOS) == (0, 1, 2, 3)

    def test_words_sorted_and_contiguous(self, vocab):
        words = vocab.tokens[4:]
        assert words == sorted(words)
        assert [vocab.token_to_id[t] for t in vocab.tokens] == list(range(len(vocab)))

    def test_json_round_trip(self, vocab):
        again = tx.Vocabulary.from_json(vocab.to_json())
        assert again.tokens == vocab.tokens

    def test_json_is_valid_json(self, vocab):
        doc = json.loads(vocab.to_json())
        assert doc["reserved"] == list(tx.RESERVED)


class TestTokenize:
    def test_empty_prompt(self, vocab):
        p = tx.tokenize("", vocab, max_len=8)
        assert p.ids.tolist() == [tx.BOS, tx.EOS] + [tx.PAD] * 6
        assert p.mask.tolist() == [True, True] + [False] * 6

    def test_known_words(self, vocab):
        p = tx.tokenize("a red circle", vocab, max_len=8)
        want = [tx.BOS, vocab.id_of("a"), vocab.id_of("red"), vocab.id_of("circle"), tx.EOS,
                tx.PAD, tx.PAD, tx.PAD]
        assert p.ids.tolist() == want

    def test_sorted_ids_by_enumeration(self, vocab):
        # ids follow the lexicographic listing: reserved block, then sorted words
        order = sorted(WORDS)
        for i, w in enumerate(order):
            assert vocab.id_of(w) == 4 + i

    def test_unknown_word_becomes_unk(self, vocab):
        p = tx.tokenize("a zxqv circle", vocab, max_len=8)
        assert p.ids[2] == tx.UNK
        assert p.ids[1] == vocab.id_of("a") and p.ids[3] == vocab.id_of("circle")

    def test_case_and_whitespace_normalization(self, vocab):
        a = tx.tokenize("  Red   CIRCLE ", vocab, max_len=8)
        b = tx.tokenize("red circle", vocab, max_len=8)
        assert a.ids.tolist() == b.ids.tolist()

    def test_overlong_rejected(self, vocab):
        with pytest.raises(tx.TokenizeError):
            tx.tokenize("a a a a a a a", vocab, max_len=8)

    def test_exactly_full_accepted(self, vocab):
        p = tx.tokenize("a a a a a a", vocab, max_len=8)
        assert p.ids[-1] == tx.EOS and p.mask.all()


class TestEncoder:
    def test_deterministic(self, vocab, enc_params):
        p = tx.tokenize("a red circle", vocab, max_len=8)
        e1 = tx.encode_text(p, enc_params).emb.data
        e2 = tx.encode_text(p, enc_params).emb.data
        np.testing.assert_array_equal(e1, e2)

    def test_distinct_prompts_distinct_embeddings(self, vocab, enc_params):
        a = tx.encode_text(tx.tokenize("a red circle", vocab, 8), enc_params).emb.data
        b = tx.encode_text(tx.tokenize("a red square", vocab, 8), enc_params).emb.data
        assert not np.array_equal(a, b)

    def test_word_order_matters(self, vocab, enc_params):
        a = tx.encode_text(tx.tokenize("red circle", vocab, 8), enc_params).emb.data
        b = tx.encode_text(tx.tokenize("circle red", vocab, 8), enc_params).emb.data
        assert not np.array_equal(a, b)

    def test_pad_stability(self, vocab, enc_params):
        """Garbage ids beyond EOS must not leak into visible rows."""
        p = tx.tokenize("a blue square", vocab, 8)
        base = tx.encode_text(p, enc_params).emb.data
        tampered = tx.Prompt(p.text, p.ids.copy(), p.mask.copy())
        tampered.ids[~tampered.mask] = 5  # overwrite PAD slots with a real token id
        out = tx.encode_text(tampered, enc_params).emb.data
        np.testing.assert_array_equal(out[p.mask], base[p.mask])

    def test_output_shape(self, vocab, enc_params):
        e = tx.encode_text(tx.tokenize("a", vocab, 8), enc_params)
        assert e.emb.shape == (8, 16)
        assert e.mask.shape == (8,)

    def test_batch_matches_single(self, vocab, enc_params):
        prompts = [tx.tokenize(s, vocab, 8) for s in ("a red circle", "blue square moving")]
        ids = np.stack([p.ids for p in prompts])
        masks = np.stack([p.mask for p in prompts])
        batch = tx.encode_batch(ids, masks, enc_params).data
        for i, p in enumerate(prompts):
            single = tx.encode_text(p, enc_params).emb.data
            np.testing.assert_array_equal(batch[i], single)

    def test_out_of_range_id_rejected(self, vocab, enc_params):
        p = tx.tokenize("a", vocab, 8)
        bad = tx.Prompt(p.text, p.ids.copy(), p.mask.copy())
        bad.ids[1] = len(vocab) + 10
        with pytest.raises(ad.ShapeError):
            tx.encode_text(bad, enc_params)

    def test_gradient_vs_finite_differences(self, vocab):
        from helpers import fd_grad, FD_RTOL
        params = tx.init_text_encoder(len(vocab), d_model=8, n_blocks=1, n_heads=2,
                                      max_len=6, seed=3)
        p = tx.tokenize("red circle", vocab, 6)
        rng = np.random.default_rng(0)
        w = rng.standard_normal((6, 8))

        def loss(ps: ParamSet):
            return ad.sum_(ad.mul(tx.encode_text(p, ps).emb, ad.constant(w)))

        g = grad(loss, params)
        for name in ("enc.tok_emb", "enc.block0.attn.wq", "enc.block0.ffn.w1", "enc.proj.w"):
            def f(x, name=name):
                saved = params[name].data.copy()
                params[name].data[...] = x
                try:
                    with ad.no_grad():
                        return float(loss(params).data)
                finally:
                    params[name].data[...] = saved

            np.testing.assert_allclose(g[name], fd_grad(f, params[name].data),
                                       rtol=FD_RTOL, atol=1e-6, err_msg=name)

    def test_all_params_reachable(self, vocab, enc_params):
        # every encoder parameter should receive nonzero gradient for a generic loss
        p = tx.tokenize("a green triangle moving", vocab, 8)

        def loss(ps):
            e = tx.encode_text(p, ps).emb
            return ad.sum_(ad.mul(e, e))

        g = grad(loss, enc_params)
        dead = [n for n, arr in g.items() if np.all(arr == 0.0)]
        assert dead == []
