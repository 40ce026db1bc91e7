import numpy as np
import pytest
from hypothesis import given, strategies as st

from wbsde.core import (CoefficientTrace, GeneratorSpec, SolutionEstimate, TerminalTime, TimeGrid,
                        WeightedNorms, WeightParams, alpha_constant, alpha_quartic_state,
                        alpha_sup_weighted_mu, cumulative_weight, describe, evaluate_coefficients, make_grid,
                        wlog_rescale)
from wbsde.errors import ConfigurationError, InvariantError


def test_make_grid_nodes():
    np.testing.assert_allclose(make_grid(1.0, 4).nodes, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(make_grid(1.0, 1).nodes, [0, 1.0])
    assert make_grid(2.0, 8).dt == 0.25


@pytest.mark.parametrize("t_cap,n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5), (np.inf, 3)])
def test_make_grid_rejects(t_cap, n):
    with pytest.raises(ConfigurationError):
        make_grid(t_cap, n)


@given(st.floats(1e-3, 50), st.integers(1, 500))
def test_grid_invariants(t_cap, n):
    g = make_grid(t_cap, n)
    assert g.nodes[0] == 0.0
    assert np.isclose(g.nodes[-1], t_cap, rtol=1e-12)
    assert np.all(np.diff(g.nodes) > 0)


def test_cumulative_weight_examples():
    g = make_grid(1.0, 4)
    assert np.all(cumulative_weight(np.zeros(5), g) == 0)
    assert cumulative_weight(np.full(5, 2.0), g)[0, 4] == pytest.approx(2.0)
    g2 = make_grid(1.0, 2)
    a = g2.nodes.copy()   # a[j] = j * dt on a 0.5 grid
    # left-Riemann: (a[0] + a[1]) * dt = (0 + 0.5) * 0.5
    assert cumulative_weight(a, g2)[0, 2] == pytest.approx(0.25)


def test_cumulative_weight_negative():
    with pytest.raises(InvariantError):
        cumulative_weight(np.array([0.0, -1.0, 0.0]), make_grid(1.0, 2))


@given(st.lists(st.floats(0, 10), min_size=3, max_size=40), st.integers(1, 30))
def test_cumulative_weight_monotone_and_additive(vals, split):
    a = np.array(vals)
    n = a.size - 1
    g = make_grid(1.0, n)
    cum = cumulative_weight(a, g)[0]
    assert np.all(np.diff(cum) >= 0)
    j = split % n
    # integral over [0, t_j] plus the segment integral from t_j equals the whole
    seg = cumulative_weight(a[j:], TimeGrid(g.dt * (n - j), n - j))[0]
    assert cum[-1] == pytest.approx(cum[j] + seg[-1], rel=1e-12, abs=1e-14)


def test_weight_params_validation():
    with pytest.raises(ConfigurationError, match="beta must be ≥ 1"):
        WeightParams(beta=0.5)
    with pytest.raises(ConfigurationError):
        WeightParams(rho=1.0)
    with pytest.raises(ConfigurationError):
        WeightParams(rho=2.0, rho_bar=2.5)
    with pytest.raises(ConfigurationError):
        WeightParams(rho=2.0, rho_bar=1.0)
    assert WeightParams(rho=3.0).rho_bar == 3.0


@given(st.floats(1, 5), st.floats(1.01, 6), st.floats(0, 10), st.floats(0, 10))
def test_weight_consistency(beta, rho, mu, nu):
    w = WeightParams(beta, rho)
    g = make_grid(1.0, 3)
    tr = CoefficientTrace.build(np.full((1, 4), mu), np.full((1, 4), nu), w, g)
    expected = beta * mu + 0.5 * rho * nu ** 2
    np.testing.assert_allclose(tr.a, expected, rtol=1e-12)


def test_trace_rejects_negative_coefficients():
    g = make_grid(1.0, 2)
    with pytest.raises(InvariantError):
        CoefficientTrace.build(np.array([[1.0, -0.1, 0.0]]), np.zeros((1, 3)), WeightParams(), g)


def test_evaluate_coefficients_scalar_and_state():
    g = make_grid(1.0, 2)
    states = np.arange(6.0).reshape(2, 3, 1)
    mu, nu = evaluate_coefficients(lambda t, x: (0.5, 0.3), states, g)
    assert mu.shape == (1, 3)
    mu, nu = evaluate_coefficients(lambda t, x: (np.abs(x[:, 0]), 1.0), states, g)
    assert mu.shape == (2, 3)
    np.testing.assert_allclose(mu, states[:, :, 0])


def test_terminal_time_invariants():
    g = make_grid(1.0, 4)
    tau = TerminalTime.deterministic(g, 3)
    assert np.all(tau.per_path_index == 4)
    with pytest.raises(InvariantError):
        TerminalTime("exit_time", np.array([0, 5]), 4, 0.0)
    with pytest.raises(InvariantError):
        TerminalTime("exit_time", np.array([0, 4]), 4)
    with pytest.raises(InvariantError):
        TerminalTime("deterministic", np.array([3, 4]), 4)
    assert TerminalTime.capped(g, 2).truncation_mass == 1.0


def test_alpha_presets_valid(rng):
    g = make_grid(1.0, 16)
    states = np.cumsum(rng.normal(0, 0.25, (50, 17, 1)), axis=1)
    w = WeightParams()
    mu = np.abs(states[:, :, 0])
    for rule in (alpha_constant(1.0), alpha_sup_weighted_mu(), alpha_quartic_state(), alpha_quartic_state(False)):
        al = np.broadcast_to(rule(g, states, mu, w), (50, 17))
        assert np.all(al > 0) and np.all(al <= 1)
        assert np.all(np.diff(al, axis=1) <= 1e-15)


def test_wlog_rescale_bound(rng):
    g = make_grid(1.0, 8)
    mu = rng.uniform(0, 2, (10, 9))
    al = wlog_rescale(np.ones((10, 9)), mu, g, 1.5)
    cum = cumulative_weight(mu, g)
    assert np.all(al <= np.exp(-1.5 * cum) + 1e-15)


def test_generator_alpha_trace_checks():
    g = make_grid(1.0, 2)
    bad = GeneratorSpec(lambda t, x, y, z: y, lambda t, x: (0.0, 0.0),
                        alpha=lambda grid, s, mu, w: np.array([[1.0, 0.5, 0.7]]))
    tr = bad.coefficient_trace(np.zeros((1, 3, 1)), g, WeightParams())
    with pytest.raises(InvariantError):
        bad.alpha_trace(np.zeros((1, 3, 1)), g, tr)


def test_solution_freeze_check():
    y = np.ones((2, 3, 1))
    z = np.zeros((2, 3, 1, 1))
    est = SolutionEstimate(y, z, np.ones((2, 1)), np.array([1, 2]))
    assert est.check_freeze()
    z[0, 2] = 1.0
    assert not est.check_freeze()


def test_weighted_norms_nonnegative():
    with pytest.raises(InvariantError):
        WeightedNorms(-1.0, 0.0, 0.0, (0.0, 0.0, 0.0), 10)


def test_describe_is_json_friendly():
    import json

    json.dumps(describe(WeightParams()))
    json.dumps(describe(make_grid(1.0, 4)))
