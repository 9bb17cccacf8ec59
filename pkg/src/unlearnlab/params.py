"""Named parameter collections, gradients through them, and checkpoint I/O.

A :class:`ParamSet` is an ordered map from dotted names to tensors, each with
a frozen flag.  Frozen parameters never receive gradients and are rejected by
the optimizer, which is how the generative stack stays untouched while the
text encoder is optimized.

Checkpoints are single files: a magic string, a little-endian uint64 giving
the length of a JSON manifest (names, shapes, dtype, frozen flags, format
version, block offsets), then the raw IEEE-754 little-endian float64 blocks
in manifest order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from typing import Callable, Iterator

import numpy as np

from .autodiff import NumericError, ShapeError, Tensor

__all__ = ["ParamSet", "grad", "value_and_grad", "save_params", "load_params"]

_MAGIC = b"ULABPRM1"
FORMAT_VERSION = 1


class ParamSet:
    """Ordered name -> Tensor map with per-parameter frozen flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self._params[name] = t
        self._frozen[name] = bool(frozen)
        return t

    def adopt(self, name: str, tensor: Tensor, frozen: bool | None = None) -> Tensor:
        """Insert an existing Tensor without copying (shared-view semantics)."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._frozen[name] = (not tensor.requires_grad) if frozen is None else bool(frozen)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if not self._frozen[n])

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def freeze_all(self) -> "ParamSet":
        for name, t in self._params.items():
            self._frozen[name] = True
            t.requires_grad = False
        return self

    def unfreeze_all(self) -> "ParamSet":
        for name, t in self._params.items():
            self._frozen[name] = False
            t.requires_grad = True
        return self

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), frozen=self._frozen[name])
        return out

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def checksum(self) -> str:
        """SHA-256 over names, shapes, frozen flags, and raw value bytes."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(repr(t.shape).encode())
            h.update(b"F" if self._frozen[name] else b"T")
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, flags, and values."""
        if self.names() != other.names():
            return False
        for name, t in self._params.items():
            if self._frozen[name] != other._frozen[name]:
                return False
            if t.shape != other[name].shape or not np.array_equal(t.data, other[name].data):
                return False
        return True


def value_and_grad(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(params)`` and return (value, gradient map).

    The map covers every non-frozen parameter; parameters the loss never
    touches get exact zero arrays.  Frozen parameters are absent.
    """
    params.zero_grads()
    loss = loss_fn(params)
    if not isinstance(loss, Tensor):
        raise TypeError("loss_fn must return a Tensor")
    if loss.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError("loss", "loss evaluated to a non-finite value")
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, t in params.trainable_items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    params.zero_grads()
    return float(loss.data), grads


def grad(loss_fn: Callable[[ParamSet], Tensor], params: ParamSet) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for each non-frozen parameter."""
    _, grads = value_and_grad(loss_fn, params)
    return grads


def save_params(params: ParamSet, path) -> None:
    entries = []
    offset = 0
    blocks = []
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "float64",
            "frozen": params.is_frozen(name),
            "offset": offset,
            "nbytes": len(raw),
        })
        blocks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "params": entries},
                          sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(manifest).to_bytes(8, "little"))
        f.write(manifest)
        for raw in blocks:
            f.write(raw)


def load_params(path) -> ParamSet:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a parameter container (bad magic)")
        n = int.from_bytes(f.read(8), "little")
        manifest = json.loads(f.read(n).decode())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {manifest.get('format_version')}")
        body = f.read()
    out = ParamSet()
    for e in manifest["params"]:
        if e["dtype"] != "float64":
            raise ValueError(f"{path}: unsupported dtype {e['dtype']}")
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        out.add(e["name"], arr, frozen=e["frozen"])
    return out
