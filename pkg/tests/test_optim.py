import math

import numpy as np
import pytest

from proxylesskd.errors import ArgumentError, DivergenceError
from proxylesskd.optim import NAG, OptimConfig, cosine_lr, nag_step


def quadratic_grad(look):
    return [p.copy() for p in look]  # gradient of 0.5 * |w|^2


class TestCosineLR:
    def test_endpoints(self):
        cfg = OptimConfig(lr0=0.35, total_steps=100)
        assert cosine_lr(cfg, 0) == 0.35
        assert cosine_lr(cfg, 100) == 0.0

    def test_midpoint(self):
        cfg = OptimConfig(lr0=0.1, total_steps=10)
        assert cosine_lr(cfg, 5) == pytest.approx(0.05, abs=1e-17)

    def test_non_negative_and_decreasing(self):
        cfg = OptimConfig(lr0=0.9, total_steps=37)
        lrs = [cosine_lr(cfg, t) for t in range(38)]
        assert all(lr >= 0 for lr in lrs)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))

    def test_past_end(self):
        with pytest.raises(ArgumentError):
            cosine_lr(OptimConfig(total_steps=3), 4)


class TestNAG:
    def test_hand_recurrence(self):
        cfg = OptimConfig(lr0=0.1, momentum=0.9, weight_decay=0.0)
        w, v = [np.array([1.0])], [np.array([0.0])]
        w, v = nag_step(w, v, quadratic_grad, cfg, 0.1)
        assert w[0][0] == pytest.approx(0.9, abs=1e-15) and v[0][0] == pytest.approx(-0.1, abs=1e-15)
        w, v = nag_step(w, v, quadratic_grad, cfg, 0.1)
        assert v[0][0] == pytest.approx(-0.171, abs=1e-15)
        assert w[0][0] == pytest.approx(0.729, abs=1e-15)

    def test_zero_momentum_is_gradient_descent(self):
        cfg = OptimConfig(momentum=0.0, weight_decay=0.0)
        w = [np.array([2.0, -3.0])]
        new, _ = nag_step(w, [np.zeros(2)], lambda look: [np.array([0.5, 0.25]) * look[0]], cfg, 0.2)
        np.testing.assert_array_equal(new[0], w[0] - 0.2 * np.array([0.5, 0.25]) * w[0])

    def test_converges_on_quadratic(self):
        cfg = OptimConfig(momentum=0.9, weight_decay=0.0)
        w, v = [np.array([1.0, -2.0, 0.5])], [np.zeros(3)]
        for step in range(500):
            w, v = nag_step(w, v, quadratic_grad, cfg, 0.1)
            if np.linalg.norm(w[0]) < 1e-6:
                break
        assert np.linalg.norm(w[0]) < 1e-6

    def test_weight_decay_shrinks_monotonically(self):
        cfg = OptimConfig(momentum=0.0, weight_decay=0.1)
        w, v = [np.array([3.0])], [np.zeros(1)]
        prev = 3.0
        for _ in range(50):
            w, v = nag_step(w, v, lambda look: [np.zeros(1)], cfg, 0.5)
            assert 0 <= w[0][0] < prev
            prev = w[0][0]

    def test_divergence_reports_step(self):
        cfg = OptimConfig()
        with pytest.raises(DivergenceError) as info:
            nag_step([np.ones(1)], [np.zeros(1)], lambda look: [np.array([math.nan])], cfg, 0.1, step=17)
        assert info.value.step == 17

    def test_stateful_wrapper_updates_in_place(self):
        w = np.array([1.0])
        opt = NAG([w], OptimConfig(lr0=0.1, momentum=0.9, weight_decay=0.0, total_steps=10**9))
        seen = []

        def grad():
            seen.append(w.copy())
            return [w.copy()]

        opt.step(grad)
        assert seen[0][0] == 1.0  # lookahead with zero velocity
        assert w[0] == pytest.approx(0.9)

    def test_bad_config(self):
        with pytest.raises(ArgumentError):
            OptimConfig(momentum=1.0)
        with pytest.raises(ArgumentError):
            OptimConfig(weight_decay=-1.0)

    def test_stateful_wrapper_matches_pure_step(self):
        rng = np.random.default_rng(0)
        cfg = OptimConfig(lr0=0.3, momentum=0.9, weight_decay=1e-3, total_steps=20)
        a = [rng.normal(size=(3, 4)), rng.normal(size=5)]
        w = [x.copy() for x in a]
        v = [np.zeros_like(x) for x in a]
        opt = NAG(a, cfg)

        def grad(look):
            return [np.sin(look[0]) * 2.0, np.tanh(look[1]) * 0.7]

        for t in range(20):
            w, v = nag_step(w, v, grad, cfg, cosine_lr(cfg, t))
            opt.step(lambda: grad(a))
            for p, q in zip(a, w):
                assert p.tobytes() == q.tobytes()

    def test_stateful_wrapper_restores_on_divergence(self):
        w = np.array([1.0, 2.0])
        opt = NAG([w], OptimConfig(total_steps=5))
        with pytest.raises(DivergenceError):
            opt.step(lambda: [np.array([1.0, math.inf])])
        assert w.tolist() == [1.0, 2.0]
