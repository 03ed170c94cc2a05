"""Optimizer checks: hand-derived step, scale invariance, convergence."""

import numpy as np
import pytest

from deepfusionnet.optim import adam_step, init_adam, zero_grads
from deepfusionnet.tensor import (
    GraphError,
    Tape,
    Tensor4,
    add,
    backward,
    make_rng,
    mean_all,
    mul,
    sub,
)


def scalar_param(value: float) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value), requires_grad=True)


class TestSingleStep:
    def test_hand_derived_first_step(self):
        # theta=1, g=1, lr=0.1: m=0.1, v=0.001, mhat=1, vhat=1,
        # update = 0.1 / (1 + 1e-8)
        p = scalar_param(1.0)
        st = init_adam([p], lr=0.1)
        p.grad = np.ones_like(p.data)
        adam_step([p], st)
        want = 1.0 - 0.1 / (1.0 + 1e-8)
        assert abs(p.item() - want) < 1e-10
        assert st.step == 1

    def test_epsilon_outside_sqrt(self):
        # with eps inside the sqrt the first step would differ at ~1e-5
        # for a tiny gradient; outside, it stays ~lr
        p = scalar_param(0.0)
        st = init_adam([p], lr=0.01)
        g = 1e-4
        p.grad = np.full_like(p.data, g)
        adam_step([p], st)
        want = -0.01 * g / (g + 1e-8)  # mhat=g, sqrt(vhat)=g, eps added after
        assert abs(p.item() - want) < 1e-12

    def test_first_step_magnitude_is_lr_at_any_scale(self):
        # holds for |g| >> eps: update = lr * g / (|g| + eps)
        for g in (1e-3, 1.0, 1e6):
            p = scalar_param(0.0)
            st = init_adam([p], lr=0.05)
            p.grad = np.full_like(p.data, g)
            adam_step([p], st)
            assert abs(abs(p.item()) - 0.05) < 0.05 * 1e-4

    def test_defaults(self):
        st = init_adam([scalar_param(0.0)], lr=0.1)
        assert (st.beta1, st.beta2, st.eps, st.step) == (0.9, 0.999, 1e-8, 0)


class TestStateHandling:
    def test_moments_update_in_place(self):
        p = scalar_param(1.0)
        st = init_adam([p], lr=0.1)
        m_id, v_id = id(st.m[0]), id(st.v[0])
        for _ in range(3):
            p.grad = np.ones_like(p.data)
            adam_step([p], st)
        assert id(st.m[0]) == m_id and id(st.v[0]) == v_id
        assert st.step == 3

    def test_missing_grad_raises(self):
        p = scalar_param(1.0)
        st = init_adam([p], lr=0.1)
        with pytest.raises(GraphError):
            adam_step([p], st)

    def test_param_count_mismatch_raises(self):
        p, q = scalar_param(1.0), scalar_param(2.0)
        st = init_adam([p], lr=0.1)
        q.grad = np.zeros_like(q.data)
        with pytest.raises(ValueError):
            adam_step([p, q], st)

    def test_bad_lr_rejected(self):
        with pytest.raises(ValueError):
            init_adam([], lr=0.0)

    def test_state_dtype_follows_params(self):
        p = Tensor4(np.zeros((1, 2, 1, 1), dtype=np.float32), requires_grad=True)
        st = init_adam([p], lr=0.1)
        assert st.m[0].dtype == np.float32 and st.v[0].dtype == np.float32

    def test_zero_grads(self):
        rng = make_rng(1)
        params = [Tensor4(rng.standard_normal((1, 2, 2, 2)), requires_grad=True) for _ in range(3)]
        for p in params:
            p.grad = rng.standard_normal(p.shape)
        zero_grads(params)
        assert all(np.all(p.grad == 0.0) for p in params)


class TestConvergence:
    def test_quadratic_bowl(self):
        # minimize mean((theta - target)^2) elementwise from a cold start
        rng = make_rng(2)
        target = Tensor4(rng.uniform(-2.0, 2.0, (1, 2, 3, 3)))
        theta = Tensor4(np.zeros((1, 2, 3, 3)), requires_grad=True)
        st = init_adam([theta], lr=0.05)
        for _ in range(800):
            zero_grads([theta])
            with Tape() as tape:
                d = sub(theta, target)
                backward(mean_all(mul(d, d)), tape)
            adam_step([theta], st)
        assert float(np.max(np.abs(theta.data - target.data))) < 1e-3

    def test_two_params_track_independent_targets(self):
        a, b = scalar_param(0.0), scalar_param(0.0)
        ta = Tensor4(np.full((1, 1, 1, 1), 1.5))
        tb = Tensor4(np.full((1, 1, 1, 1), -0.5))
        st = init_adam([a, b], lr=0.1)
        for _ in range(400):
            zero_grads([a, b])
            with Tape() as tape:
                da, db = sub(a, ta), sub(b, tb)
                loss = mean_all(add(mul(da, da), mul(db, db)))
                backward(loss, tape)
            adam_step([a, b], st)
        assert abs(a.item() - 1.5) < 1e-2
        assert abs(b.item() + 0.5) < 1e-2
