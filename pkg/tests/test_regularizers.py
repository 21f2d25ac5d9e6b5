import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikebp.oracle import numeric_gradient
from spikebp.regularizers import (
    RegConfig,
    epoch_schedule,
    exp_reg_cost,
    exp_reg_grad,
    exp_reg_step,
    threshold_regularize,
)

CFG = RegConfig(lam=0.002, beta=10.0)


def unit_row(m, seed=0):
    w = np.random.default_rng(seed).normal(size=m)
    return w / np.linalg.norm(w)


# exponential regularization

def test_cost_at_unit_norm():
    assert exp_reg_cost(unit_row(5), CFG) == pytest.approx(0.001, rel=1e-12)


def test_cost_at_zero():
    assert exp_reg_cost(np.zeros(4), CFG) == pytest.approx(4.5399929762484855e-08, rel=1e-12)


def test_cost_without_lambda():
    assert exp_reg_cost(np.ones(3), RegConfig(lam=0.0)) == 0.0


def test_cost_per_row():
    w = np.vstack([unit_row(4), np.zeros(4)])
    np.testing.assert_allclose(exp_reg_cost(w, CFG), [0.001, 4.5399929762484855e-08], rtol=1e-12)


def test_grad_at_unit_norm():
    w = unit_row(6, 1)
    np.testing.assert_allclose(exp_reg_grad(w, CFG), 0.02 * w, rtol=1e-12)


def test_grad_at_zero():
    assert not exp_reg_grad(np.zeros(5), CFG).any()


@settings(max_examples=50)
@given(st.integers(1, 20), st.floats(0.1, 1.6), st.integers(0, 2**31))
def test_grad_matches_finite_differences(m, norm, seed):
    w = unit_row(m, seed) * norm
    num = numeric_gradient(lambda v: float(exp_reg_cost(v, CFG)), w)
    np.testing.assert_allclose(exp_reg_grad(w, CFG), num, rtol=1e-6, atol=1e-12)


def test_overflow_is_reported():
    with pytest.raises(FloatingPointError, match="sum of squares"):
        exp_reg_cost(np.full(4, 20.0), CFG)


def test_step_matches_explicit_step_for_small_rates():
    w = unit_row(8, 2) * 1.05
    explicit = -0.004 * exp_reg_grad(w, CFG)
    # backward Euler reads h at the new norm: relative gap ~ 2*beta*h*sum(w^2) ~ 5e-3
    np.testing.assert_allclose(exp_reg_step(w, CFG, 0.004), explicit, rtol=1e-2)


def test_step_never_overshoots():
    w = np.full(4, 3.0)
    new = w + exp_reg_step(w, CFG, 0.004)
    assert np.all(new >= 0) and np.all(new < w)


def run_pure_decay(s0, steps, eta=0.004, m=50):
    w = unit_row(m, 3) * np.sqrt(s0)
    norms = [s0]
    for _ in range(steps):
        w = w + exp_reg_step(w, CFG, eta)
        norms.append(float(w @ w))
    return np.array(norms)


def test_pure_decay_from_above_and_below():
    above = run_pure_decay(3.0, 20_000)
    below = run_pure_decay(0.3, 20_000)
    assert np.all(np.diff(above) <= 0) and np.all(np.diff(below) <= 0)
    # both end in a bounded band: high norms are pulled in fast, low norms barely move
    assert 0.5 < above[-1] < 1.0
    assert 0.29 < below[-1] <= 0.3
    assert above[-1] > below[-1]
    # different starting norms above one end up on the same trajectory
    assert run_pure_decay(1.5, 20_000)[-1] == pytest.approx(above[-1], abs=1e-3)


def test_decay_rate_shrinks_as_norm_falls():
    norms = run_pure_decay(1.5, 5000)
    rates = -np.diff(norms) / norms[:-1]
    assert np.all(np.diff(rates) <= 1e-15)


# threshold regularization

def layer(n, m=3, th=1.0):
    return np.full(n, th), np.zeros((n, m))


def test_two_of_ten_fire():
    th, w = layer(10)
    threshold_regularize(th, w, np.array([2, 7]), 0.0001, 0.01)
    expected = np.full(10, 1.0 - 0.0002)
    expected[[2, 7]] = 1.0 + 0.0008
    np.testing.assert_allclose(th, expected, rtol=0, atol=1e-15)
    assert th.sum() == pytest.approx(10.0, rel=1e-15)


def test_nobody_fires():
    th, w = layer(10)
    threshold_regularize(th, w, np.array([], dtype=np.int64), 0.0001, 0.01)
    assert np.all(th == 1.0)


def test_everybody_fires():
    th, w = layer(6)
    threshold_regularize(th, w, np.arange(6), 0.0001, 0.01)
    np.testing.assert_allclose(th, 1.0, rtol=0, atol=1e-15)


def test_floor_shortfall_goes_into_weights():
    th = np.array([0.0102, 1.0, 1.0, 1.0])
    w = np.zeros((4, 5))
    threshold_regularize(th, w, np.array([1, 2, 3]), 0.001, 0.01)
    # neuron 0 would drop by 0.003 to 0.0072; the 0.0028 shortfall lands on each weight
    assert th[0] == 0.01
    np.testing.assert_allclose(w[0], 0.0028, rtol=1e-12)
    assert not w[1:].any()


@settings(max_examples=200)
@given(
    st.lists(st.floats(0.5, 2.0), min_size=1, max_size=30),
    st.data(),
    st.floats(1e-5, 1e-3),
)
def test_sum_conserved_without_clamp(ths, data, rho):
    th = np.array(ths)
    fired = np.array(sorted(data.draw(st.sets(st.integers(0, len(ths) - 1)))), dtype=np.int64)
    before = th.sum()
    threshold_regularize(th, np.zeros((len(ths), 2)), fired, rho, 1e-3)
    # exact in real arithmetic; the float sum differs only by rounding
    assert th.sum() == pytest.approx(before, rel=1e-13)


@settings(max_examples=200)
@given(
    st.lists(st.floats(0.001, 0.05), min_size=1, max_size=30),
    st.data(),
    st.floats(1e-5, 1e-2),
)
def test_thresholds_never_below_floor(ths, data, rho):
    th = np.array(ths) + 0.01
    fired = np.array(sorted(data.draw(st.sets(st.integers(0, len(ths) - 1)))), dtype=np.int64)
    w = np.zeros((len(ths), 3))
    threshold_regularize(th, w, fired, rho, 0.01)
    assert np.all(th >= 0.01)
    assert np.all(w >= 0)


# schedules

def test_schedule_epoch_zero():
    assert epoch_schedule(0.004, 0.0001, 0, RegConfig()) == (0.004, 0.0001)


def test_schedule_one_epoch():
    eta, rho = epoch_schedule(1.0, 1.0, 1, RegConfig())
    assert eta == pytest.approx(0.9718328750329811, rel=1e-14) and rho == eta


def test_schedule_35_epochs():
    eta, _ = epoch_schedule(1.0, 1.0, 35, RegConfig())
    assert eta == pytest.approx(0.36787944117144233, rel=1e-12)


def test_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        epoch_schedule(1.0, 1.0, -1, RegConfig())


@pytest.mark.parametrize("kw", [dict(lam=-1.0), dict(beta=0.0), dict(rho=-1e-4), dict(epoch_decay=1.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RegConfig(**kw)
