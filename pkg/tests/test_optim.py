import math

import numpy as np
import pytest

from hybriddp.errors import ConfigurationError, ShapeError
from hybriddp.model import GradVector, init_params
from hybriddp.optim import OptimizerSpec, Schedule, _step, apply_update, lr_at, make_optimizer

from conftest import tiny_config


def test_cosine_schedule_points():
    s = Schedule(0.1, 100)
    assert lr_at(s, 0) == 0.1
    assert lr_at(s, 100) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(s, 50) == pytest.approx(0.05, rel=1e-15)
    assert lr_at(s, 500) == lr_at(s, 100)
    lrs = [lr_at(s, t) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_constant_schedule():
    s = Schedule(0.3, 10, "constant")
    assert {lr_at(s, t) for t in range(20)} == {0.3}


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        Schedule(0.0, 10)
    with pytest.raises(ConfigurationError):
        Schedule(0.1, 10, "linear")


def test_sgd_step_moves_each_coordinate_by_lr():
    p = init_params(tiny_config())
    n = p.layout.size
    st = make_optimizer("sgd", "full", n)
    q, _ = apply_update(p, GradVector(np.ones(n), "full"), st, 0.1)
    np.testing.assert_allclose(q.values, p.values - 0.1, rtol=0, atol=1e-15)


@pytest.mark.parametrize("kind", ["adam", "yogi", "rmsprop", "momentum", "sgd"])
def test_zero_gradients_leave_params_unchanged(kind):
    p = init_params(tiny_config())
    n = p.layout.size
    st = make_optimizer(kind, "full", n)
    q = p
    for _ in range(50):
        q, st = apply_update(q, GradVector(np.zeros(n), "full"), st, 0.01)
    np.testing.assert_array_equal(q.values, p.values)


def test_truncated_update_leaves_sensitive_partition():
    p = init_params(tiny_config())
    idx = p.layout.scope_indices("truncated")
    st = make_optimizer("adam", "truncated", len(idx))
    q, st = apply_update(p, GradVector(np.ones(len(idx)), "truncated"), st, 0.1)
    np.testing.assert_array_equal(q.w_s, p.w_s)
    assert np.all(q.w_ns != p.w_ns) and np.all(q.w_c != p.w_c)
    assert st.step == 1


def test_scope_mismatch_is_rejected():
    p = init_params(tiny_config())
    st = make_optimizer("sgd", "full", p.layout.size)
    with pytest.raises(ShapeError):
        apply_update(p, GradVector(np.zeros(3), "truncated"), st, 0.1)
    with pytest.raises(ShapeError):
        apply_update(p, GradVector(np.zeros(3), "full"), st, 0.1)


def test_unknown_hyperparameter():
    with pytest.raises(ConfigurationError):
        make_optimizer("adam", "full", 3, momentum=0.5)
    with pytest.raises(ConfigurationError):
        make_optimizer("lamb", "full", 3)


def test_adam_first_step_is_signed_lr():
    st = make_optimizer("adam", "full", 3)
    delta, _ = _step(st, np.array([2.0, -0.5, 1e-3]), 0.01)
    np.testing.assert_allclose(delta, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_rmsprop_and_momentum_rules():
    g = np.array([1.0, -2.0])
    st = make_optimizer("rmsprop", "full", 2)
    delta, st = _step(st, g, 0.1)
    np.testing.assert_allclose(st.v, 0.1 * g * g)
    np.testing.assert_allclose(delta, -0.1 * g / (np.sqrt(0.1 * g * g) + 1e-8))
    st = make_optimizer("momentum", "full", 2, momentum=0.5)
    _, st = _step(st, g, 0.1)
    delta, st = _step(st, g, 0.1)
    np.testing.assert_allclose(delta, -0.1 * 1.5 * g)


def _second_moments(kind, grads):
    st = make_optimizer(kind, "full", 1)
    out = []
    for g in grads:
        _, st = _step(st, np.array([g]), 1e-3)
        out.append(float(st.v[0]))
    return np.array(out)


def test_yogi_and_adam_second_moments_under_growing_gradients():
    # gradients of a 1-D quadratic f(x) = x^2 / 2 driven away from the minimum,
    # so g_t^2 is nondecreasing and v_t <= g_t^2 throughout
    grads = [1.0 * 1.05 ** t for t in range(200)]
    va, vy = _second_moments("adam", grads), _second_moments("yogi", grads)
    assert va[0] == vy[0]
    assert np.all(vy <= np.square(grads)) and np.all(va <= np.square(grads))
    # with sign(v - g^2) = -1 yogi adds (1-b2) g^2 while adam adds (1-b2)(g^2 - v),
    # so yogi's estimate is never smaller after the first step
    assert np.all(vy[1:] >= va[1:])
    b2 = 0.999
    expected = np.cumsum([(1 - b2) * g * g for g in grads])
    np.testing.assert_allclose(vy, expected, rtol=1e-12)


def test_yogi_shrinks_when_gradients_fall():
    st = make_optimizer("yogi", "full", 1)
    _, st = _step(st, np.array([10.0]), 1e-3)
    v0 = st.v[0]
    _, st = _step(st, np.array([0.1]), 1e-3)
    assert st.v[0] == pytest.approx(v0 - 0.001 * 0.01)


def test_optimizer_spec_builds_state_and_schedule():
    spec = OptimizerSpec("yogi", 0.02, "cosine", {"beta1": 0.8})
    st = spec.build("truncated", 5)
    assert st.kind == "yogi" and st.hyper["beta1"] == 0.8 and st.m.shape == (5,)
    s = spec.schedule_for(0)
    assert s.total_steps == 1 and s.base_lr == 0.02
    assert math.isclose(lr_at(spec.schedule_for(10), 5), 0.01)
