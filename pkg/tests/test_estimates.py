import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wbsde.bsde_solver import SolverSettings, picard_solve
from wbsde.core import CoefficientTrace, SolutionEstimate, TerminalCondition, WeightParams, make_grid
from wbsde.errors import ConfigurationError
from wbsde.estimates import (apriori_check, continuous_dependence, explicit_constant, loglog_slope,
                             paired_check, stability_sequence, weighted_norms, write_checks_csv)
from wbsde.fixtures import get_fixture, linear_generator
from wbsde.oracle import linear_bsde_pathwise


def _random_est(rng, n=200, N=8):
    y = rng.normal(size=(n, N + 1, 1))
    z = rng.normal(size=(n, N + 1, 1, 1))
    z[:, -1] = 0
    return SolutionEstimate(y, z, y[:, -1].copy(), np.full(n, N))


def test_unit_weight_gives_plain_statistics():
    rng = np.random.default_rng(0)
    g = make_grid(1.0, 8)
    est = _random_est(rng)
    trace = CoefficientTrace.build(np.zeros((1, 9)), np.zeros((1, 9)), WeightParams(), g)
    wn = weighted_norms(est, trace, g.dt)
    y = est.y[:, :, 0]
    assert wn.xi_norm_sq == pytest.approx(np.mean(y[:, -1] ** 2))
    assert wn.y_norm_sq == pytest.approx(np.mean(np.max(y ** 2, axis=1)))
    assert wn.z_norm_sq == pytest.approx(np.mean(np.sum(est.z[:, :-1, 0, 0] ** 2, axis=1) * g.dt))


def test_constant_weight_terminal_norm():
    g = make_grid(1.0, 16)
    n = 10
    est = SolutionEstimate(np.ones((n, 17, 1)), np.zeros((n, 17, 1, 1)), np.ones((n, 1)), np.full(n, 16))
    c = 0.7
    # beta = 1, nu = 0 makes a = mu
    trace = CoefficientTrace.build(np.full((1, 17), c), np.zeros((1, 17)), WeightParams(), g)
    assert weighted_norms(est, trace, g.dt).xi_norm_sq == pytest.approx(math.exp(2 * c), rel=1e-12)


def test_oracle_sup_norm_matches_closed_form():
    prob = get_fixture("linear-constant-coeff").build(500, 32, seed=1)
    trace = prob.generator.coefficient_trace(prob.ens.state, prob.grid, prob.weights)
    sol = linear_bsde_pathwise(trace, prob.xi, prob.ens, prob.grid)
    n = sol.y.shape[0]
    est = SolutionEstimate(sol.y[:, :, None], np.zeros((n, 33, 1, 1)), sol.y[:, -1:], prob.tau.per_path_index)
    direct = np.max(np.exp(2 * trace.cum_a[0]) * np.exp(0.5 * (1 - prob.grid.nodes)) ** 2)
    wn = weighted_norms(est, trace, prob.grid.dt)
    assert abs(wn.y_norm_sq - direct) <= 2 * wn.std_err[1] + 1e-12 * direct


@settings(max_examples=40)
@given(st.floats(1.0, 3.0), st.floats(1.01, 4.0), st.floats(1.0, 2.0), st.floats(0.0, 1.0))
def test_norms_monotone_in_weights(beta, rho, dbeta, drho):
    rng = np.random.default_rng(2)
    g = make_grid(1.0, 8)
    est = _random_est(rng, 50)
    mu, nu = rng.uniform(0, 1, (50, 9)), rng.uniform(0, 1, (50, 9))
    lo = weighted_norms(est, CoefficientTrace.build(mu, nu, WeightParams(beta, rho), g), g.dt)
    hi = weighted_norms(est, CoefficientTrace.build(mu, nu, WeightParams(beta + dbeta, rho + drho), g), g.dt)
    assert hi.xi_norm_sq >= lo.xi_norm_sq
    assert hi.y_norm_sq >= lo.y_norm_sq
    assert hi.z_norm_sq >= lo.z_norm_sq


def test_explicit_constant_value():
    assert explicit_constant(2.0) == 18496.0


def test_paired_check_verdict():
    rng = np.random.default_rng(3)
    a = rng.normal(size=1000)
    assert paired_check("same", a, a.copy()).passed
    assert not paired_check("bigger", a + 1.0, a).passed


def _solve(fid, n, N, seed, **kw):
    prob = get_fixture(fid).build(n, N, seed)
    res = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings(weights=prob.weights, **kw))
    return prob, res


def test_apriori_zero_fixture():
    prob, res = _solve("zero", 1000, 16, 4)
    rep = apriori_check(res.estimate, prob.generator, prob.ens, prob.weights)
    assert rep.passed
    for c in rep.checks:
        assert c.lhs == 0.0 and c.rhs == 0.0


def test_apriori_linear_fixture():
    prob, res = _solve("linear-constant-coeff", 4000, 32, 5)
    rep = apriori_check(res.estimate, prob.generator, prob.ens, prob.weights)
    assert rep.passed
    assert rep.constants["data-bound"] == 18496.0
    assert rep.smallest_C["data-bound"] <= 18496.0


def test_apriori_monotone_in_constant_and_rho_bar():
    prob, res = _solve("linear-constant-coeff", 2000, 16, 6)
    lhs = []
    for rb in (1.2, 1.5, 2.0):
        w = WeightParams(prob.weights.beta, prob.weights.rho, rb)
        rep = apriori_check(res.estimate, prob.generator, prob.ens, w)
        lhs.append(rep.by_id("explicit-constant").lhs)
        assert rep.passed
    assert lhs[0] >= lhs[1] >= lhs[2]


def test_apriori_needs_driver_bound():
    prob, res = _solve("linear-constant-coeff", 200, 8, 7)
    g = prob.generator.replace(f_bound=None)
    with pytest.raises(ConfigurationError):
        apriori_check(res.estimate, g, prob.ens, prob.weights)
    with pytest.raises(ConfigurationError):
        apriori_check(res.estimate, prob.generator, prob.ens, prob.weights, r_probe=0.5)


def test_checks_csv(tmp_path):
    p = tmp_path / "checks.csv"
    write_checks_csv([paired_check("x", np.zeros(3), np.ones(3))], p)
    rows = p.read_text().splitlines()
    assert rows[0] == "check_id,lhs,rhs,stderr,verdict" and rows[1].endswith("PASS")


def _shifted_xi(prob, delta):
    base = prob.xi(prob.ens, prob.tau)
    return base + delta


def test_dependence_identical_problems():
    prob, res = _solve("linear-constant-coeff", 2000, 16, 8)
    trace = res.trace
    rep = continuous_dependence((res.estimate, prob.generator), (res.estimate, prob.generator), prob.ens, trace)
    assert rep.lhs == 0.0 and rep.passed


def test_dependence_scales_quadratically():
    prob, res = _solve("linear-constant-coeff", 4000, 32, 9)
    st_ = SolverSettings(weights=prob.weights)
    lhs = []
    deltas = (0.1, 0.05, 0.025)
    for d in deltas:
        other = picard_solve(prob.generator, _shifted_xi(prob, d), prob.ens, prob.tau, st_)
        rep = continuous_dependence((res.estimate, prob.generator), (other.estimate, prob.generator),
                                    prob.ens, res.trace)
        assert rep.passed
        lhs.append(rep.lhs)
    assert abs(loglog_slope(deltas, lhs) - 2.0) <= 0.3


def test_dependence_driver_shift_ratio_stable():
    prob, res = _solve("linear-constant-coeff", 2000, 16, 10)
    st_ = SolverSettings(weights=prob.weights)
    ratios = []
    for eps in (0.1, 0.05, 0.025):
        g2 = linear_generator(shift=eps, alpha=prob.generator.alpha)
        other = picard_solve(g2, prob.xi, prob.ens, prob.tau, st_)
        rep = continuous_dependence((res.estimate, prob.generator), (other.estimate, g2), prob.ens, res.trace)
        assert rep.passed
        ratios.append(rep.ratio[0])
    assert max(ratios) <= 1.5 * min(ratios)


def test_dependence_rejects_mismatched_grids():
    a = _solve("linear-constant-coeff", 200, 8, 11)
    b = _solve("linear-constant-coeff", 200, 16, 11)
    with pytest.raises(ConfigurationError):
        continuous_dependence((a[1].estimate, a[0].generator), (b[1].estimate, b[0].generator),
                              a[0].ens, a[1].trace)


def test_stability_constant_sequence_at_floor():
    prob, res = _solve("linear-constant-coeff", 1000, 16, 12)
    seq = [(n, res.estimate, prob.generator) for n in (1, 2, 4)]
    tab = stability_sequence((res.estimate, prob.generator), seq, prob.ens, res.trace)
    assert tab.passed and max(tab.distance) == 0.0


def test_stability_inverse_n_shift():
    prob, res = _solve("linear-constant-coeff", 4000, 32, 13)
    st_ = SolverSettings(weights=prob.weights)
    ns = (1, 2, 4, 8)
    seq = []
    for n in ns:
        other = picard_solve(prob.generator, _shifted_xi(prob, 1.0 / n), prob.ens, prob.tau, st_)
        seq.append((n, other.estimate, prob.generator))
    tab = stability_sequence((res.estimate, prob.generator), seq, prob.ens, res.trace)
    assert abs(loglog_slope(ns, tab.distance) + 2.0) <= 0.3
    assert all(b < a for a, b in zip(tab.distance, tab.distance[1:]))
