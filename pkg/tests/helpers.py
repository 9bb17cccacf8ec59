"""Shared test utilities: the finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from unlearnlab import autodiff as ad

# Central differences with h=1e-4 give truncation error O(h^2) ~ 1e-8 and
# float64 round-off ~ 1e-12 per element, comfortably inside these tolerances.
FD_H = 1e-4
FD_RTOL = 1e-3
FD_ATOL = 1e-7


def fd_grad(f, x: np.ndarray, h: float = FD_H) -> np.ndarray:
    """Elementwise central-difference gradient of the scalar function ``f``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, arrays, rtol: float = FD_RTOL, atol: float = FD_ATOL, seed: int = 0):
    """Compare reverse-mode gradients of ``build(*tensors)`` against the oracle.

    ``build`` maps Tensors to a Tensor of any shape; the implicit loss is a
    fixed random weighting of the output so every element matters.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [ad.parameter(a.copy()) for a in arrays]
    out = build(*leaves)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(out.shape) if out.shape else float(rng.standard_normal())

    def scalarize(t):
        return ad.sum_(ad.mul(t, w)) if t.shape else ad.mul(t, w)

    scalarize(out).backward()

    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            vals = [arrays[j] if j != i else x for j in range(len(arrays))]
            with ad.no_grad():
                o = build(*[ad.constant(v) for v in vals])
                return float(scalarize(o).data)

        want = fd_grad(f, arrays[i])
        got = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for operand {i}")
