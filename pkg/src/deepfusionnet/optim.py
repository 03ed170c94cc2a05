"""Adam with bias correction.

Moment buffers live in ``AdamState`` aligned index-for-index with the
parameter list the state was built from; both are updated in place so
checkpointing can serialize them directly.  The epsilon sits outside the
square root in the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import GraphError, Tensor4


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(params: list[Tensor4], lr: float) -> AdamState:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state = AdamState(lr=lr)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: list[Tensor4], state: AdamState) -> None:
    """One update over all parameters; gradients must already be populated."""
    if not state.lr > 0:  # also catches the NaN a bare checkpoint load leaves
        raise ValueError(f"learning rate not set (got {state.lr}); assign state.lr first")
    if len(params) != len(state.m):
        raise ValueError(f"state built for {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise GraphError(f"parameter {i} has no gradient; run backward first")
        if state.m[i].shape != p.data.shape:
            raise ValueError(f"parameter {i} shape {p.data.shape} does not match state {state.m[i].shape}")
        g = p.grad
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: list[Tensor4]) -> None:
    for p in params:
        p.zero_grad()
