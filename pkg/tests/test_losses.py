import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlrr.errors import DimensionError, ParameterError
from vlrr.gradcheck import finite_diff_check
from vlrr.losses import (
    HUBER_C,
    HuberParams,
    cross_entropy_loss,
    huber_elementwise,
    huber_loss,
    mse_loss,
)
from vlrr.ops import softmax

C = 1.345


def hand_huber(r, c=C):
    a = abs(r)
    return 0.5 * r * r if a < c else c * a - 0.5 * c * c


def test_default_c():
    assert HUBER_C == 1.345
    assert HuberParams().c == 1.345
    with pytest.raises(ParameterError):
        HuberParams(0.0)


def test_quadratic_branch_value():
    assert huber_loss(np.array([0.5]), np.array([0.0]))[0] == pytest.approx(0.125, abs=1e-15)


def test_linear_branch_value():
    # 1.345 * 2 - 0.5 * 1.345**2 = 2.69 - 0.9045125
    assert huber_loss(np.array([2.0]), np.array([0.0]))[0] == pytest.approx(1.7854875, abs=1e-12)
    assert huber_loss(np.array([0.0]), np.array([2.0]))[0] == pytest.approx(1.7854875, abs=1e-12)


def test_value_and_slope_continuity_at_c():
    eps = 1e-12
    below, above = C - eps, C + eps
    q = 0.5 * below**2
    lin = C * above - 0.5 * C * C
    assert abs(q - lin) < 1e-9
    assert abs(huber_elementwise(np.array(below), C) - huber_elementwise(np.array(above), C)) < 1e-9
    gb = huber_loss(np.array([below]), np.array([0.0]))[1][0]
    ga = huber_loss(np.array([above]), np.array([0.0]))[1][0]
    assert abs(gb - ga) < 1e-9
    assert abs(ga - C) < 1e-9


def test_gradient_bounded_for_outlier():
    pred = np.zeros((4, 5))
    target = np.zeros((4, 5))
    target[1, 2] = 1.0e3
    _, g = huber_loss(pred, target)
    n = pred.size
    assert np.max(np.abs(g)) <= C / n + 1e-15
    assert g[1, 2] == pytest.approx(-C / n)
    _, gm = mse_loss(pred, target)
    assert abs(gm[1, 2]) == pytest.approx(1.0e3 / n)  # unbounded for mse


def test_mse_value_and_gradient():
    v, g = mse_loss(np.array([[1.0, 3.0]]), np.array([[0.0, 0.0]]))
    assert v == pytest.approx((0.5 + 4.5) / 2)
    assert np.allclose(g, [[0.5, 1.5]])
    with pytest.raises(DimensionError):
        mse_loss(np.zeros(3), np.zeros(4))


@given(st.floats(-50, 50, allow_nan=False), st.floats(0.05, 5.0))
def test_elementwise_matches_hand_formula(r, c):
    assert huber_elementwise(np.array(r), c) == pytest.approx(hand_huber(r, c), rel=1e-12, abs=1e-12)


@settings(max_examples=60)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_huber_never_exceeds_mse(r):
    h = huber_elementwise(r, C)
    m = 0.5 * r * r
    assert np.all(h <= m + 1e-9 * (1 + m))
    inside = np.abs(r) < C
    assert np.array_equal(h[inside], m[inside])
    assert np.all(h[np.abs(r) > C + 1e-9] < m[np.abs(r) > C + 1e-9])


@pytest.mark.parametrize("seed", range(5))
def test_huber_finite_difference(seed):
    g = np.random.default_rng(seed)
    pred = g.normal(size=(3, 4)) * 3
    target = g.normal(size=(3, 4))
    r = pred - target
    pred[np.abs(np.abs(r) - C) < 1e-3] += 0.01
    _, grad = huber_loss(pred, target)
    rep = finite_diff_check(lambda: huber_loss(pred, target)[0], {"p": pred}, {"p": grad})
    assert rep.passed(1e-4)


def test_cross_entropy_uniform_is_log_k():
    probs = np.full((3, 10), 0.1)
    v, _ = cross_entropy_loss(probs, np.array([0, 4, 9]))
    assert v == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_clamps_zero_probability():
    v, _ = cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([1]))
    assert np.isfinite(v) and v == pytest.approx(-math.log(1e-12))


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_logit_gradient(seed):
    g = np.random.default_rng(seed)
    logits = g.normal(size=(4, 6)) * 2
    labels = g.integers(0, 6, size=4)
    _, grad = cross_entropy_loss(softmax(logits), labels)
    rep = finite_diff_check(
        lambda: cross_entropy_loss(softmax(logits), labels)[0], {"z": logits}, {"z": grad}
    )
    assert rep.passed(1e-4)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ParameterError):
        cross_entropy_loss(np.full((2, 3), 1 / 3), np.array([0, 3]))
    with pytest.raises(DimensionError):
        cross_entropy_loss(np.full((2, 3), 1 / 3), np.array([0]))
