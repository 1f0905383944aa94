import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twistlab.errors import InvalidInputError
from twistlab.optim import (
    EmaState,
    LarsConfig,
    ScheduleConfig,
    SgdMomentumState,
    cosine_value,
    ema_momentum,
    ema_update,
    is_excluded,
    lars_local_rate,
    lars_step,
    sgd_momentum_step,
)


def test_cosine_endpoints_and_midpoint():
    s = ScheduleConfig(1.0, 0.2, 100)
    assert cosine_value(s, 0) == 1.0
    assert cosine_value(s, 100) == pytest.approx(0.2, abs=1e-15)
    assert cosine_value(s, 50) == pytest.approx(0.6, abs=1e-15)


def test_cosine_warmup_is_linear():
    s = ScheduleConfig(2.0, 0.0, 100, warmup_steps=10)
    assert cosine_value(s, 0) == 0.0
    assert cosine_value(s, 5) == pytest.approx(1.0)
    assert cosine_value(s, 10) == 2.0


@given(st.integers(1, 500), st.data())
def test_cosine_monotone_after_warmup(total, data):
    s = ScheduleConfig(1.0, 0.0, total)
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert cosine_value(s, b) <= cosine_value(s, a) + 1e-15


def test_cosine_rejects_bad_steps():
    s = ScheduleConfig(1.0, 0.0, 10)
    with pytest.raises(InvalidInputError):
        cosine_value(s, 11)
    with pytest.raises(InvalidInputError):
        ScheduleConfig(1.0, 0.0, 10, warmup_steps=10)


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    sgd_momentum_step(p, {"w": np.array([0.5, 0.5])}, SgdMomentumState(0.0, 0.0), 0.1)
    np.testing.assert_allclose(p["w"], [0.95, -2.05])


def test_sgd_two_step_recurrence():
    p = {"w": np.array([1.0])}
    st_ = SgdMomentumState(0.5, 0.0)
    for _ in range(2):
        sgd_momentum_step(p, {"w": np.array([1.0])}, st_, 0.1)
    assert p["w"][0] == pytest.approx(0.75, abs=1e-15)


def test_sgd_velocity_decays_geometrically():
    p = {"w": np.array([0.0])}
    st_ = SgdMomentumState(0.9, 0.0, {"w": np.array([1.0])})
    for k in range(1, 6):
        sgd_momentum_step(p, {"w": np.array([0.0])}, st_, 0.1)
        assert st_.velocity["w"][0] == pytest.approx(0.9**k, abs=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(InvalidInputError):
        sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, SgdMomentumState(), 0.1)


def test_lars_local_rate_cases():
    p = np.array([0.0, 2.0])
    g = np.array([1.0, 0.0])
    assert lars_local_rate(p, g, 0.001, 0.0) == pytest.approx(0.002, abs=1e-18)
    assert lars_local_rate(np.zeros(3), g[:1].repeat(3), 0.001, 0.0) == 1.0


def test_lars_excluded_matches_sgd_bitwise():
    rng = np.random.default_rng(0)
    grads = [rng.standard_normal(4) for _ in range(3)]
    a = {"head.0.bias": rng.standard_normal(4)}
    b = {"head.0.bias": a["head.0.bias"].copy()}
    sa, sb = SgdMomentumState(0.9, 0.0), SgdMomentumState(0.9, 0.0)
    for g in grads:
        lars_step(a, {"head.0.bias": g}, LarsConfig(0.001, 1e-4), 0.3, sa)
        sgd_momentum_step(b, {"head.0.bias": g}, sb, 0.3)
    assert np.array_equal(a["head.0.bias"], b["head.0.bias"])


def test_lars_scales_weight_update():
    p = {"head.0.weight": np.array([3.0, 4.0])}
    lars_step(p, {"head.0.weight": np.array([0.0, 5.0])}, LarsConfig(1.0, 0.0), 1.0,
              SgdMomentumState(0.0, 0.0))
    # rate = 1 * 5 / 5 = 1
    np.testing.assert_array_equal(p["head.0.weight"], [3.0, -1.0])


def test_is_excluded():
    assert is_excluded("backbone.0.bn.gamma")
    assert is_excluded("head.2.bias")
    assert not is_excluded("head.2.weight")


@pytest.mark.parametrize("m", [0.0, 0.5, 0.99, 1.0])
def test_ema_update_bitwise(m):
    rng = np.random.default_rng(1)
    t = rng.standard_normal((3, 4))
    s = rng.standard_normal((3, 4))
    expected = m * t + (1.0 - m) * s
    teacher = EmaState({"w": t.copy()}, m)
    ema_update(teacher, {"w": s})
    assert np.array_equal(teacher.params["w"], expected)


def test_ema_cases():
    s = {"w": np.array([4.0])}
    assert ema_update(EmaState({"w": np.array([2.0])}), s, 0.5).params["w"][0] == 3.0
    assert ema_update(EmaState({"w": np.array([2.0])}), s, 1.0).params["w"][0] == 2.0
    assert ema_update(EmaState({"w": np.array([2.0])}), s, 0.0).params["w"][0] == 4.0
    with pytest.raises(InvalidInputError):
        ema_update(EmaState({"w": np.array([2.0])}), s, 1.5)


def test_ema_from_student_copies():
    s = {"w": np.ones(2)}
    t = EmaState.from_student(s)
    s["w"][0] = 5.0
    assert t.params["w"][0] == 1.0


def test_ema_momentum_ramp():
    assert ema_momentum(0.9, 1.0, 0, 10) == pytest.approx(0.9)
    assert ema_momentum(0.9, 1.0, 10, 10) == 1.0
    assert ema_momentum(0.9, 1.0, 5, 10) == pytest.approx(0.95)
    assert math.isclose(ema_momentum(0.99, 0.99, 3, 10), 0.99)
