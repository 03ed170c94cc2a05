"""Finite-difference oracles shared across the test suite.

``build`` is always a zero-argument callable that runs a forward pass and
returns a scalar Tensor4.  The analytic path runs it under a fresh tape and
backpropagates; the numeric path re-runs it with each element of the target
tensor nudged by +/- eps.  All checks are done in float64.
"""

import numpy as np

from deepfusionnet.tensor import Tape, backward

EPS = 1e-5
TOL = 1e-4


def rel_err(a, b) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def analytic_grad(build, target) -> np.ndarray:
    target.zero_grad()
    with Tape() as tape:
        backward(build(), tape)
    return target.grad.copy()


def fd_grad(build, target, eps: float = EPS) -> np.ndarray:
    out = np.zeros(target.shape, dtype=np.float64)
    flat = target.data.reshape(-1)
    out_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = build().item()
        flat[i] = orig - eps
        fm = build().item()
        flat[i] = orig
        out_flat[i] = (fp - fm) / (2.0 * eps)
    return out


def assert_grad_matches(build, target, tol: float = TOL, eps: float = EPS) -> None:
    analytic = analytic_grad(build, target)
    numeric = fd_grad(build, target, eps)
    err = rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
