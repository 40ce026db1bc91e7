import math

import numpy as np
import pytest

from wbsde.bsde_solver import (SolverSettings, backward_sweep, contraction_ratios, picard_solve,
                               residual_check, validate_assumptions)
from wbsde.core import GeneratorSpec, SolutionEstimate, TerminalCondition, TerminalTime, WeightParams
from wbsde.errors import ConfigurationError, DivergenceError
from wbsde.fixtures import (exp_quartic_generator, get_fixture, linear_generator,
                            polynomial_monotone_generator)
from wbsde.oracle import linear_bsde_pathwise


def _zero_g():
    return GeneratorSpec(lambda t, x, y, z: np.zeros_like(y), lambda t, x: (0.0, 0.0), z_free=True, name="zero")


def test_settings_validation():
    with pytest.raises(ConfigurationError):
        SolverSettings(picard_tol=0.0)
    with pytest.raises(ConfigurationError):
        SolverSettings(picard_max=0)
    with pytest.raises(ConfigurationError):
        SolverSettings(inner_damping=1.5)


def test_constant_martingale():
    prob = get_fixture("heat").build(4000, 16, seed=1)
    est = backward_sweep(_zero_g(), TerminalCondition.constant(1.3), prob.ens, prob.tau, None, SolverSettings())
    np.testing.assert_allclose(est.y, 1.3, rtol=1e-12)
    # the intercept makes the node mean of z equal the sample mean of 1.3 dB / dt
    se = 1.3 / math.sqrt(prob.grid.dt * 4000)
    assert np.all(np.abs(est.z[:, :-1, 0, 0].mean(axis=0)) < 4 * se)


def test_linear_fixture_root_value():
    prob = get_fixture("linear-constant-coeff").build(4000, 32, seed=2)
    res = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings(weights=prob.weights))
    assert abs(res.estimate.y0[0] - math.exp(0.5)) <= 0.02 * math.exp(0.5)
    assert res.estimate.check_freeze()
    ratios, se = contraction_ratios(res)
    rho = prob.weights.rho
    assert np.all(ratios[:4] <= 1 / rho + 0.1)


def test_heat_root_value():
    prob = get_fixture("heat").build(20000, 32, seed=3)
    res = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings())
    assert abs(res.estimate.y0[0] - 1.0) <= 0.03
    # z-free driver: the second distance is exactly zero, no further sweeps
    assert len(res.distances) == 2 and res.distances[1] == 0.0


def test_refinement_decreases_error():
    errs = []
    for N in (4, 8, 16, 32):
        prob = get_fixture("linear-constant-coeff").build(250 * N, N, seed=4)
        est, _ = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings())
        errs.append(abs(est.y0[0] - math.exp(0.5)))
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_polynomial_monotone_converges():
    prob = get_fixture("ex3.12-polynomial-monotone").build(4000, 32, seed=5)
    settings = SolverSettings(implicit_y=True, weights=prob.weights, picard_max=30, picard_tol=1e-10)
    res = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, settings)
    assert res.distances[-1] < settings.picard_tol
    assert res.estimate.check_freeze()
    assert residual_check(res.estimate, prob.generator, prob.xi, prob.ens, prob.tau).passed


def test_divergence_detected():
    # declared nu = 0 while the driver depends strongly on z: distances blow up
    g = GeneratorSpec(lambda t, x, y, z: 30.0 * z[:, :, 0], lambda t, x: (0.0, 0.0), name="z-heavy")
    prob = get_fixture("heat").build(2000, 16, seed=6)
    with pytest.raises(DivergenceError) as info:
        picard_solve(g, prob.xi, prob.ens, prob.tau, SolverSettings(picard_max=20))
    d = info.value.distances
    assert len(d) >= 4 and d[-1] > d[-2] > d[-3] > d[-4]
    assert "rho" in str(info.value)


def test_exit_time_freeze():
    prob = get_fixture("elliptic-exit-time").build(2000, 64, seed=7)
    res = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings())
    est = res.estimate
    assert est.check_freeze()
    rows = np.arange(est.y.shape[0])
    np.testing.assert_array_equal(est.y[rows, est.per_path_index], est.xi)


def _linear_oracle_estimate(prob):
    trace = prob.generator.coefficient_trace(prob.ens.state, prob.grid, prob.weights)
    sol = linear_bsde_pathwise(trace, prob.xi, prob.ens, prob.grid)
    n, np1 = sol.y.shape
    z = sol.z.reshape(n, np1, 1, 1).copy()
    z[:, -1] = 0.0
    return SolutionEstimate(sol.y[:, :, None], z, sol.y[:, -1:], prob.tau.per_path_index)


def test_residual_oracle_injection_passes():
    prob = get_fixture("motivational-counterexample-rho1").build(5000, 32, seed=8)
    est = _linear_oracle_estimate(prob)
    assert residual_check(est, prob.generator, prob.xi, prob.ens, prob.tau).passed


def test_residual_flags_injected_defect():
    prob = get_fixture("linear-constant-coeff").build(4000, 32, seed=9)
    est, _ = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings())
    assert residual_check(est, prob.generator, prob.xi, prob.ens, prob.tau).passed
    y = est.y.copy()
    y[:, 10] += 0.1
    bad = SolutionEstimate(y, est.z, est.xi, est.per_path_index)
    rep = residual_check(bad, prob.generator, prob.xi, prob.ens, prob.tau)
    assert rep.flagged[10]
    assert not rep.passed


def test_residual_martingale():
    prob = get_fixture("heat").build(5000, 32, seed=10)
    est, _ = picard_solve(prob.generator, prob.xi, prob.ens, prob.tau, SolverSettings())
    rep = residual_check(est, prob.generator, prob.xi, prob.ens, prob.tau)
    assert np.all(np.abs(rep.mean) < 4 * rep.std_err + rep.allowance[:, None])


def test_assumptions_pass_for_catalogue_generators():
    rep = validate_assumptions(exp_quartic_generator(), 20000)
    assert rep.passed and rep.n_skipped < 1000
    assert validate_assumptions(polynomial_monotone_generator(), 20000, l=2).passed
    assert validate_assumptions(linear_generator(), 5000).passed


def test_assumptions_detect_violations():
    sq = GeneratorSpec(lambda t, x, y, z: y ** 2, lambda t, x: (0.0, 0.0), name="y2")
    rep = validate_assumptions(sq, 5000)
    assert not rep.monotone_pass and rep.monotone_violation > 0
    lip = GeneratorSpec(lambda t, x, y, z: 2 * np.abs(z[:, :, 0]), lambda t, x: (0.0, 1.0), name="2|z|")
    rep = validate_assumptions(lip, 5000)
    assert not rep.lipschitz_pass and rep.lipschitz_violation > 0


def test_understated_nu_fails():
    # nu = |B| is too small for the (sin|z|, |z|) pair in two dimensions
    rep = validate_assumptions(polynomial_monotone_generator(nu_scale=1.0), 20000, l=2)
    assert not rep.lipschitz_pass
