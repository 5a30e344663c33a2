"""Adam updates and the learning-rate schedule."""

import numpy as np
import pytest

from mri2ct.optim import adam_init, adam_step, grad_norm, lr_at
from mri2ct.tensor import Tensor

B1, B2, EPS = 0.5, 0.999, 1e-8


def scalar_param(value=0.0):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return [("p", p)], p


class TestAdamStep:
    def test_zero_gradient_from_fresh_state_leaves_parameter(self):
        named, p = scalar_param(1.5)
        state = adam_init(named)
        for _ in range(3):
            p.grad = np.zeros(1, dtype=np.float32)
            adam_step(named, state, lr=1e-3)
        assert p.data[0] == np.float32(1.5)
        assert state.m["p"][0] == 0.0 and state.v["p"][0] == 0.0

    def test_zero_gradient_decays_existing_moments(self):
        named, p = scalar_param(1.5)
        state = adam_init(named)
        state.m["p"][0] = 0.8
        state.v["p"][0] = 0.4
        p.grad = np.zeros(1, dtype=np.float32)
        adam_step(named, state, lr=1e-3)
        assert state.m["p"][0] == np.float32(0.8 * B1)
        assert state.v["p"][0] == np.float32(0.4 * B2)

    def test_first_step_hand_formula(self):
        named, p = scalar_param(0.0)
        state = adam_init(named)
        p.grad = np.ones(1, dtype=np.float32)
        adam_step(named, state, lr=2e-4)
        # m-hat = v-hat = 1 at step 1: update = -lr * 1/(1 + eps)
        assert abs(p.data[0] - (-2e-4)) < 1e-9

    def test_two_steps_match_scalar_reference_trace(self):
        named, p = scalar_param(0.0)
        state = adam_init(named)
        lr = 1e-2
        got = []
        for _ in range(2):
            p.grad = np.ones(1, dtype=np.float32)
            adam_step(named, state, lr)
            got.append(float(p.data[0]))

        # independent plain-python Adam trace, constant gradient 1
        m = v = 0.0
        theta = 0.0
        trace = []
        for t in (1, 2):
            m = B1 * m + (1 - B1) * 1.0
            v = B2 * v + (1 - B2) * 1.0
            mh = m / (1 - B1 ** t)
            vh = v / (1 - B2 ** t)
            theta -= lr * mh / (np.sqrt(vh) + EPS)
            trace.append(theta)

        np.testing.assert_allclose(got, trace, rtol=1e-6)

    def test_update_opposes_gradient_sign_from_zero_moments(self, rng):
        for sign in (+1.0, -1.0):
            named, p = scalar_param(0.7)
            state = adam_init(named)
            for _ in range(5):
                before = float(p.data[0])
                p.grad = np.array([sign * float(rng.uniform(0.1, 3.0))],
                                  dtype=np.float32)
                adam_step(named, state, lr=1e-3)
                assert (p.data[0] - before) * sign < 0

    def test_missing_gradient_counts_as_zero(self):
        named, p = scalar_param(2.0)
        state = adam_init(named)
        p.grad = None
        adam_step(named, state, lr=1e-3)
        assert p.data[0] == np.float32(2.0)
        assert state.step == 1

    def test_step_counter_strictly_increases(self):
        named, p = scalar_param()
        state = adam_init(named)
        for expected in (1, 2, 3):
            p.grad = np.ones(1, dtype=np.float32)
            adam_step(named, state, lr=1e-3)
            assert state.step == expected


class TestLrSchedule:
    def test_full_scale_endpoints(self):
        assert lr_at(0, 2e-4, 100) == 2e-4
        assert lr_at(100, 2e-4, 100) == 0.0

    def test_three_quarters_point(self):
        assert abs(lr_at(75, 2e-4, 100) - 1e-4) < 1e-12

    def test_non_increasing_and_continuous_at_breakpoint(self):
        E = 10
        values = [lr_at(e, 2e-4, E) for e in range(E + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        # continuity at E/2: one epoch past the hold still close to max
        half = E // 2
        assert values[half] == 2e-4
        gap = values[half] - values[half + 1]
        assert 0 < gap <= 2e-4 / (E - E / 2) + 1e-12

    def test_invalid_arguments_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, 2e-4, 10)
        with pytest.raises(ValueError):
            lr_at(0, 2e-4, 0)


class TestGradNorm:
    def test_global_l2(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([0.0, 4.0])
        assert abs(grad_norm([("a", a), ("b", b)]) - 5.0) < 1e-12
