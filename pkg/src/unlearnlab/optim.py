"""Adam with bias correction, decoupled weight decay, and an ascent mode.

The unlearning procedure maximizes the diffusion loss, so the optimizer takes
an explicit ``direction``: ``"ascent"`` negates the incoming gradients while
the logged loss keeps its natural sign.  Weight decay is decoupled (applied
directly to the parameter, not folded into the gradient) and always shrinks
toward zero regardless of direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError
from .params import ParamSet

__all__ = ["AdamState", "init_adam", "adam_step"]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
    for name, t in params.trainable_items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], state: AdamState,
              direction: str = "descent") -> None:
    """Apply one Adam update in place.

    Validates every gradient (known parameter, not frozen, matching shape)
    before touching any parameter, so a bad call never leaves the set in a
    half-updated state.
    """
    if direction not in ("descent", "ascent"):
        raise ValueError(f"direction must be 'descent' or 'ascent', got {direction!r}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if params.is_frozen(name):
            raise ValueError(f"gradient supplied for frozen parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {params[name].shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name].data)
            state.v[name] = np.zeros_like(params[name].data)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    sign = -1.0 if direction == "ascent" else 1.0

    for name, g in grads.items():
        g = sign * g
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p = params[name].data
        if state.weight_decay != 0.0:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
