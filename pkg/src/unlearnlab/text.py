"""Word-level tokenizer and the tiny transformer text encoder.

The encoder is the one trainable component during unlearning: per-token
embeddings it produces condition both the image and the video denoiser
through cross-attention, so a change here transfers across domains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor
from .params import ParamSet

__all__ = [
    "PAD", "UNK", "BOS", "EOS", "RESERVED",
    "Vocabulary", "Prompt", "TextEmbedding", "TokenizeError",
    "tokenize", "init_text_encoder", "encode_text", "encode_batch",
]

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")


class TokenizeError(ValueError):
    """Prompt cannot be tokenized (too many words for the context length)."""


class Vocabulary:
    """Reserved tokens at ids 0..3, then lexicographically sorted words."""

    def __init__(self, words):
        ordered = sorted(set(w.lower() for w in words))
        for r in RESERVED:
            if r in ordered:
                raise ValueError(f"reserved token {r!r} cannot be a vocabulary word")
        self.tokens: list[str] = list(RESERVED) + ordered
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token.lower(), UNK)

    def to_json(self) -> str:
        return json.dumps({"reserved": list(RESERVED), "words": self.tokens[len(RESERVED):]},
                          sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        if tuple(doc["reserved"]) != RESERVED:
            raise ValueError("vocabulary file has unexpected reserved tokens")
        return cls(doc["words"])


@dataclass
class Prompt:
    text: str
    ids: np.ndarray     # (max_len,) int64, BOS ... EOS then PAD
    mask: np.ndarray    # (max_len,) bool, True on BOS..EOS inclusive


@dataclass
class TextEmbedding:
    emb: Tensor          # (max_len, d)
    mask: np.ndarray     # (max_len,) bool


def tokenize(text: str, vocab: Vocabulary, max_len: int = 16) -> Prompt:
    words = text.lower().split()
    if len(words) > max_len - 2:
        raise TokenizeError(f"prompt has {len(words)} words; at most {max_len - 2} fit in the context")
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[0] = BOS
    for i, w in enumerate(words):
        ids[1 + i] = vocab.id_of(w)
    ids[1 + len(words)] = EOS
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(words) + 2] = True
    return Prompt(text=text, ids=ids, mask=mask)


def init_text_encoder(vocab_size: int, d_model: int = 64, n_blocks: int = 2,
                      n_heads: int = 4, max_len: int = 16, seed: int = 0) -> ParamSet:
    if d_model % n_heads:
        raise ValueError("d_model must be divisible by n_heads")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    ps = ParamSet()
    ps.add("enc.tok_emb", nn.normal_init(rng, (vocab_size, d_model), 0.02))
    ps.add("enc.pos_emb", nn.normal_init(rng, (max_len, d_model), 0.02))
    std = d_model**-0.5
    for i in range(n_blocks):
        p = f"enc.block{i}."
        ps.add(p + "ln1.g", np.ones(d_model))
        ps.add(p + "ln1.b", np.zeros(d_model))
        for nm in ("wq", "wk", "wv", "wo"):
            ps.add(p + f"attn.{nm}", nn.normal_init(rng, (d_model, d_model), std))
        ps.add(p + "attn.bo", np.zeros(d_model))
        ps.add(p + "ln2.g", np.ones(d_model))
        ps.add(p + "ln2.b", np.zeros(d_model))
        ps.add(p + "ffn.w1", nn.normal_init(rng, (d_model, 4 * d_model), std))
        ps.add(p + "ffn.b1", np.zeros(4 * d_model))
        ps.add(p + "ffn.w2", nn.normal_init(rng, (4 * d_model, d_model), (4 * d_model) ** -0.5))
        ps.add(p + "ffn.b2", np.zeros(d_model))
    ps.add("enc.final_ln.g", np.ones(d_model))
    ps.add("enc.final_ln.b", np.zeros(d_model))
    ps.add("enc.proj.w", nn.normal_init(rng, (d_model, d_model), std))
    ps.add("enc.proj.b", np.zeros(d_model))
    return ps


def _encoder_dims(params: ParamSet) -> tuple[int, int, int, int]:
    v, d = params["enc.tok_emb"].shape
    l = params["enc.pos_emb"].shape[0]
    n_blocks = 0
    while f"enc.block{n_blocks}.ln1.g" in params:
        n_blocks += 1
    return v, d, l, n_blocks


def encode_batch(ids: np.ndarray, masks: np.ndarray, params: ParamSet,
                 n_heads: int = 4) -> Tensor:
    """Encode a batch of id sequences to per-token embeddings (B, L, d).

    Self-attention is bidirectional; PAD positions are masked out as keys, so
    ids beyond EOS can never influence the visible rows.
    """
    v, d, max_len, n_blocks = _encoder_dims(params)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] != max_len:
        raise ShapeError(f"expected ids of shape (B, {max_len}), got {ids.shape}")
    if ids.max() >= v:
        raise ShapeError(f"token id {int(ids.max())} out of range for vocabulary of size {v}")
    b = ids.shape[0]
    dh = d // n_heads

    x = ad.add(ad.gather_rows(params["enc.tok_emb"], ids), params["enc.pos_emb"])
    # (B, 1, 1, L) additive bias: 0 on visible keys, MASK_NEG on PAD keys
    bias = np.where(masks[:, None, None, :], 0.0, nn.MASK_NEG)

    for i in range(n_blocks):
        p = f"enc.block{i}."
        h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = ad.matmul(h, params[p + "attn.wq"])
        k = ad.matmul(h, params[p + "attn.wk"])
        vv = ad.matmul(h, params[p + "attn.wv"])
        q = ad.transpose(ad.reshape(q, (b, max_len, n_heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, max_len, n_heads, dh)), (0, 2, 1, 3))
        vv = ad.transpose(ad.reshape(vv, (b, max_len, n_heads, dh)), (0, 2, 1, 3))
        att = nn.attention(q, k, vv, mask_bias=bias)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, max_len, d))
        x = ad.add(x, nn.linear(att, params[p + "attn.wo"], params[p + "attn.bo"]))
        h2 = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h2 = ad.gelu(nn.linear(h2, params[p + "ffn.w1"], params[p + "ffn.b1"]))
        x = ad.add(x, nn.linear(h2, params[p + "ffn.w2"], params[p + "ffn.b2"]))

    x = ad.layer_norm(x, params["enc.final_ln.g"], params["enc.final_ln.b"])
    return nn.linear(x, params["enc.proj.w"], params["enc.proj.b"])


def encode_text(prompt: Prompt, params: ParamSet, n_heads: int = 4) -> TextEmbedding:
    out = encode_batch(prompt.ids[None, :], prompt.mask[None, :], params, n_heads=n_heads)
    return TextEmbedding(emb=ad.reshape(out, out.shape[1:]), mask=prompt.mask.copy())
