import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mams.errors import ConfigError, CorruptionError, UsageError
from mams.model import build_model
from mams.momentum import (EmaState, QuadraticProblem, ema_closed_form, ema_state_for, ema_update,
                           record_sgd_run, residuals, unrolled_exact, unrolled_rhs,
                           verify_unrolled_approximation)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def test_single_update_by_hand():
    s = EmaState(m=0.9, epsilon=[np.array([1.0, 0.0])])
    ema_update(s, [np.array([0.0, 10.0])])
    np.testing.assert_allclose(s.epsilon[0], [0.9, 1.0], rtol=1e-15)
    assert s.t == 1


def test_m_zero_copies_theta():
    s = EmaState(m=0.0, epsilon=[np.array([5.0])])
    ema_update(s, [np.array([-3.25])])
    assert s.epsilon[0][0] == -3.25


@pytest.mark.parametrize("m", [0.0, 0.5, 0.9, 0.999])
def test_iterated_update_matches_closed_form(m):
    rng = np.random.default_rng(int(m * 1000))
    worst = 0.0
    for case in range(25):
        shape = () if case % 2 else (int(rng.integers(1, 6)),)
        t = int(rng.integers(1, 101))
        eps1 = rng.normal(size=shape) + 3.0
        hist = [rng.normal(size=shape) + 3.0 for _ in range(t - 1)]
        s = EmaState(m=m, epsilon=[np.array(eps1, dtype=np.float64)], record=True)
        for th in hist:
            ema_update(s, [th])
        worst = max(worst, rel_err(s.epsilon[0], ema_closed_form(hist, eps1, m, t)))
    assert worst <= 1e-12


def test_closed_form_accepts_parameter_lists():
    rng = np.random.default_rng(0)
    eps1 = [rng.normal(size=(2, 2)), rng.normal(size=3)]
    s = EmaState(m=0.7, epsilon=[e.copy() for e in eps1], record=True)
    for _ in range(10):
        ema_update(s, [rng.normal(size=(2, 2)), rng.normal(size=3)])
    cf = ema_closed_form(s.history, s.epsilon_initial, 0.7, 11)
    for a, b in zip(s.epsilon, cf):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_closed_form_needs_enough_history():
    with pytest.raises(UsageError):
        ema_closed_form([1.0], 0.0, 0.5, 5)
    with pytest.raises(UsageError):
        ema_closed_form([], 0.0, 0.5, 0)


def test_geometric_forgetting_with_constant_theta():
    # |eps_t - c| = m^t |eps_0 - c| with exact binary fractions
    s = EmaState(m=0.5, epsilon=[np.array([1.0])])
    for t in range(1, 30):
        ema_update(s, [np.array([0.0])])
        assert s.epsilon[0][0] == 0.5 ** t


def test_fixed_point_is_exact():
    s = EmaState(m=0.999, epsilon=[np.array([0.1, -7.3])])
    for _ in range(100):
        ema_update(s, [np.array([0.1, -7.3])])
    np.testing.assert_array_equal(s.epsilon[0], [0.1, -7.3])


@settings(max_examples=200, deadline=None)
@given(prev=st.floats(-1e6, 1e6), theta=st.floats(-1e6, 1e6), m=st.sampled_from([0.0, 0.3, 0.9, 0.999]))
def test_convexity(prev, theta, m):
    s = EmaState(m=m, epsilon=[np.array([prev])])
    ema_update(s, [np.array([theta])])
    assert min(prev, theta) <= s.epsilon[0][0] <= max(prev, theta)


def test_invalid_m_and_corruption():
    with pytest.raises(ConfigError):
        EmaState(m=1.0, epsilon=[np.zeros(1)])
    with pytest.raises(ConfigError):
        EmaState(m=-0.1, epsilon=[np.zeros(1)])
    s = EmaState(m=0.5, epsilon=[np.zeros(2)])
    with pytest.raises(CorruptionError):
        ema_update(s, [np.zeros(3)])
    with pytest.raises(CorruptionError):
        ema_update(s, [np.zeros(2), np.zeros(2)])


def test_model_state_tracks_weights_and_bn_buffers(tiny_config):
    model = build_model(tiny_config, np.random.default_rng(0))
    s = ema_state_for(model, m=0.5)
    w = model.expansion.conv.weight
    w.data += 1.0
    model.expansion.bn.state.running_mean[:] = 2.0
    before = model.momentum.conv.weight.data.copy()
    ema_update(s, model.expansion.params())
    np.testing.assert_allclose(model.momentum.conv.weight.data, before + 0.5, rtol=1e-14)
    np.testing.assert_allclose(model.momentum.bn.state.running_mean, 1.0)


def test_ema_state_needs_momentum_branch(tiny_config):
    import dataclasses

    model = build_model(dataclasses.replace(tiny_config, use_momentum=False), np.random.default_rng(0))
    with pytest.raises(UsageError):
        ema_state_for(model)


def test_unrolled_exact_form_is_an_identity():
    p = QuadraticProblem.random(dim=5, seed=2)
    run = record_sgd_run(p.grad, p.theta0, 1e-2, 0.9, 40)
    for t in (1, 2, 10, 40):
        np.testing.assert_allclose(unrolled_exact(run, t), run.epsilons[t - 1], rtol=1e-10, atol=1e-12)


def test_unrolled_residual_shrinks_with_eta_and_vanishes_at_zero():
    res = verify_unrolled_approximation((1e-3, 5e-4, 2.5e-4), m=0.9, steps=50)
    assert res["monotone"]
    w = res["worst"]
    # first order in eta: halving eta roughly halves the residual
    assert 1.8 < w[0] / w[1] < 2.2 and 1.8 < w[1] / w[2] < 2.2
    zero = verify_unrolled_approximation((0.0,), m=0.9, steps=50)
    assert zero["worst"][0] == 0.0


def test_residual_rows_and_sgd_only():
    p = QuadraticProblem.random()
    run = record_sgd_run(p.grad, p.theta0, 1e-3, 0.9, 5)
    rep = residuals(run)
    rows = list(rep.rows())
    assert [r["step"] for r in rows] == [1, 2, 3, 4, 5]
    assert set(rows[0]) == {"step", "eta", "max_residual", "mean_residual"}
    np.testing.assert_allclose(unrolled_rhs(run, 1), run.thetas[0] + 0.9 * (run.epsilons[0] - run.thetas[0]))
    run.optimizer = "adam"
    with pytest.raises(UsageError):
        residuals(run)
