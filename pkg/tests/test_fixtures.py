import numpy as np
import pytest

from wbsde.bsde_solver import validate_assumptions
from wbsde.core import WeightParams
from wbsde.errors import ConfigurationError
from wbsde.fixtures import FIXTURES, catalogue, get_fixture, get_pde_preset

REQUIRED = ("linear-constant-coeff", "motivational-counterexample-rho1", "ex3.12-polynomial-monotone",
            "ex3.8-exp-cubic", "ex3.9-exp-quartic", "ex3.10-infinite-horizon", "ex3.11-sixth-power")


def test_catalogue_ids():
    ids = [row[0] for row in catalogue()]
    for fid in REQUIRED:
        assert fid in ids
    assert len(set(ids)) == len(ids)


def test_unknown_fixture():
    with pytest.raises(ConfigurationError):
        get_fixture("nope")
    with pytest.raises(ConfigurationError):
        get_pde_preset("nope")


@pytest.mark.parametrize("fid", sorted(FIXTURES))
def test_fixture_builds(fid):
    prob = get_fixture(fid).build(64, 8, seed=1)
    xi = prob.xi(prob.ens, prob.tau)
    assert xi.shape == (64, prob.generator.k)
    assert np.all(np.isfinite(xi))
    trace = prob.generator.coefficient_trace(prob.ens.state, prob.grid, prob.weights)
    assert np.all(trace.mu >= 0) and np.all(trace.nu >= 0)
    alpha = prob.generator.alpha_trace(prob.ens.state, prob.grid, trace)
    if alpha is not None:
        assert np.all(alpha > 0) and np.all(np.isfinite(alpha))


@pytest.mark.parametrize("fid", ["linear-constant-coeff", "ex3.8-exp-cubic", "ex3.9-exp-quartic",
                                 "ex3.10-infinite-horizon", "ex3.11-sixth-power",
                                 "ex3.12-polynomial-monotone"])
def test_declared_coefficients_hold(fid):
    fx = get_fixture(fid)
    g, _ = fx.make(WeightParams())
    assert validate_assumptions(g, 20000, seed=3, l=fx.sde.l).passed


def test_terminal_kinds():
    prob = get_fixture("ex3.8-exp-cubic").build(500, 32, seed=2)
    assert prob.tau.kind == "exit_time"
    assert np.all(prob.tau.per_path_index <= 32)
    prob = get_fixture("ex3.10-infinite-horizon").build(50, 16, seed=2)
    assert prob.grid.t_cap == 4.0
