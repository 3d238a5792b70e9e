import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhtctrl.dynamics import CostSpec, GLModel, SimulationBlowUpError, metastable_states, simulate

GL1 = GLModel("1d", 64, 0.2, 1.0)
GL2 = GLModel("2d", 8, 0.5, 1.0)


def central_diff(model, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (model.potential_value(x + e) - model.potential_value(x - e)) / (2 * eps)
    return g


def test_potential_closed_forms():
    assert abs(GL1.potential_value(np.zeros(64)) - 16 / 65) < 1e-12
    assert abs(GL1.potential_value(np.ones(64)) - 13.0) < 1e-12
    assert abs(GL2.potential_value(np.zeros(64)) - 16 / 81) < 1e-12


def test_drift_at_origin_is_pure_control():
    for model in (GL1, GL2):
        for a in (-1.0, 0.3, 1.0):
            np.testing.assert_array_equal(model.drift(np.zeros(model.d), a), 20 * a * model.omega)


def test_interior_of_plus_state_is_stationary():
    b = GL1.drift(np.ones(64), 0.0)
    np.testing.assert_allclose(b[1:-1], 0.0, atol=1e-14)
    assert b[0] < 0 and b[-1] < 0  # the boundary pulls the end sites towards zero


@pytest.mark.parametrize("model", [GL1, GL2], ids=["1d", "2d"])
def test_drift_matches_central_differences(model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-2, 2, model.d)
        a = rng.uniform(-1, 1)
        fd = -central_diff(model, x) + 20 * a * model.omega
        np.testing.assert_allclose(model.drift(x, a), fd, atol=1e-6 * max(1, np.abs(fd).max()))


def test_control_windows():
    assert set(np.unique(GL1.omega)) == {0.0, 1.0}
    on = np.nonzero(GL1.omega)[0] + 1
    assert on.min() == 16 and on.max() == 38  # i/m in [0.25, 0.6]
    g = GL2.omega.reshape(8, 8)
    np.testing.assert_array_equal(g[1:6, 1:6], 1.0)  # i/m in [0.2, 0.8] for i = 2..6
    assert g.sum() == 25


def test_frozen_dynamics():
    cost = CostSpec()
    x0 = np.array([0.5, -1.0, 0.2, 0.0])
    model = GLModel("1d", 4, potential="zero", noise=False, gain=0.0)
    x, r = simulate(model, cost, x0, 0.7, 0.1, 20, np.random.default_rng(0))
    np.testing.assert_array_equal(x, x0)
    assert abs(r - cost.running(x0, 0.7) * 0.1) < 1e-15


def test_ornstein_uhlenbeck_variance():
    model = GLModel("1d", 1, potential="quadratic", beta=1.0)
    dt, N = 0.1, 100_000
    x, _ = simulate(model, CostSpec(), np.zeros((N, 1)), 0.0, dt, 200, np.random.default_rng(1))
    var = x[:, 0].var(ddof=1)
    se = var * np.sqrt(2.0 / (N - 1))
    assert abs(var - (1 - np.exp(-2 * dt))) <= 3 * se


def test_plus_state_is_metastable():
    y_plus, _ = metastable_states(GL1)
    x, _ = simulate(GL1, CostSpec(), np.repeat(y_plus[None], 1000, 0), 0.0, 0.1, 20, np.random.default_rng(2))
    assert np.mean(np.sum((x - y_plus) ** 2, axis=1) / 64) < 0.2


def test_reproducible_and_nonnegative_cost():
    x0 = np.random.default_rng(0).uniform(-2, 2, (50, 16))
    model = GLModel("1d", 16)
    out1 = simulate(model, CostSpec(), x0, 0.5, 0.1, 20, np.random.default_rng(5))
    out2 = simulate(model, CostSpec(), x0, 0.5, 0.1, 20, np.random.default_rng(5))
    np.testing.assert_array_equal(out1[0], out2[0])
    np.testing.assert_array_equal(out1[1], out2[1])
    assert np.all(out1[1] >= 0)


def test_substep_refinement_is_within_noise():
    model = GLModel("1d", 16)
    x0 = np.full((1000, 16), 0.5)
    means, ses = [], []
    for n_sub, seed in ((20, 3), (40, 4)):
        x, _ = simulate(model, CostSpec(), x0, 0.3, 0.1, n_sub, np.random.default_rng(seed))
        site_mean = x.mean(axis=1)
        means.append(site_mean.mean())
        ses.append(site_mean.std(ddof=1) / np.sqrt(len(site_mean)))
    assert abs(means[0] - means[1]) < np.hypot(*ses)


def test_blow_up_is_reported():
    model = GLModel("1d", 4)
    with np.errstate(all="ignore"), pytest.raises(SimulationBlowUpError, match="inner step"):
        simulate(model, CostSpec(), np.full(4, 1e120), 0.0, 0.1, 5, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(x=st.lists(st.floats(-3, 3), min_size=4, max_size=4), a=st.floats(-1, 1))
def test_costs_nonnegative(x, a):
    c = CostSpec()
    assert c.running(np.array(x), a) >= 0 and c.terminal(np.array(x)) >= 0


def test_invalid_arguments():
    with pytest.raises(ValueError):
        GLModel("3d", 4)
    with pytest.raises(ValueError):
        simulate(GL1, CostSpec(), np.zeros(64), 0.0, 0.0)
    with pytest.raises(ValueError):
        simulate(GL1, CostSpec(), np.zeros(8), 0.0, 0.1)
    with pytest.raises(ValueError):
        CostSpec(K=0)
