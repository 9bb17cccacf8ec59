"""Latent codec: the E/D pair mapping pixels to the diffusion working space.

Two kinds.  ``identity`` works directly in pixel space.  ``linear`` packs each
2x2 pixel patch into channels (space-to-depth) and mixes channels with a fixed
orthogonal matrix, so encode/decode are exact mutual inverses up to float
rounding while still exercising a genuinely non-trivial E and D.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import ShapeError

__all__ = ["LatentCodec", "codec_encode", "codec_decode", "make_codec"]

_PATCH = 2  # space-to-depth factor for the linear codec


class LatentCodec:
    def __init__(self, kind: str, image_shape: tuple[int, int, int] = (3, 16, 16), seed: int = 2024):
        if kind not in ("identity", "linear"):
            raise ValueError(f"unknown codec kind {kind!r}")
        c, h, w = image_shape
        self.kind = kind
        self.image_shape = (c, h, w)
        if kind == "identity":
            self.latent_shape = (c, h, w)
            self.mix = None
        else:
            if h % _PATCH or w % _PATCH:
                raise ShapeError(f"linear codec needs image dims divisible by {_PATCH}, got {image_shape}")
            cz = c * _PATCH * _PATCH
            self.latent_shape = (cz, h // _PATCH, w // _PATCH)
            rng = np.random.default_rng(seed)
            q, r = np.linalg.qr(rng.standard_normal((cz, cz)))
            # fix signs so the factorization is unique and deterministic
            self.mix = q * np.sign(np.diag(r))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.kind, self.image_shape)).encode())
        if self.mix is not None:
            h.update(np.ascontiguousarray(self.mix).tobytes())
        return h.hexdigest()

    # -- core maps (batched or single, plain numpy: the codec is never trained) --

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.image_shape:
            raise ShapeError(f"codec expects images {self.image_shape}, got {x.shape[1:]}")
        if self.kind == "identity":
            z = x.copy()
        else:
            b = x.shape[0]
            c, h, w = self.image_shape
            p = _PATCH
            # (b,c,h,w) -> (b, c*p*p, h/p, w/p) with patch pixels stacked into channels
            z = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 1, 3, 5, 2, 4)
            z = z.reshape(b, c * p * p, h // p, w // p)
            z = np.einsum("ij,bjhw->bihw", self.mix, z)
        return z[0] if single else z

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 3
        if single:
            z = z[None]
        if z.shape[1:] != self.latent_shape:
            raise ShapeError(f"codec expects latents {self.latent_shape}, got {z.shape[1:]}")
        if self.kind == "identity":
            x = z.copy()
        else:
            b = z.shape[0]
            c, h, w = self.image_shape
            p = _PATCH
            x = np.einsum("ji,bjhw->bihw", self.mix, z)  # orthogonal: inverse is transpose
            x = x.reshape(b, c, p, p, h // p, w // p).transpose(0, 1, 4, 2, 5, 3)
            x = x.reshape(b, c, h, w)
        return x[0] if single else x


def make_codec(kind: str, image_shape: tuple[int, int, int] = (3, 16, 16)) -> LatentCodec:
    return LatentCodec(kind, image_shape)


def codec_encode(x: np.ndarray, codec: LatentCodec) -> np.ndarray:
    return codec.encode(x)


def codec_decode(z: np.ndarray, codec: LatentCodec) -> np.ndarray:
    return codec.decode(z)
