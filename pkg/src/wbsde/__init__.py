"""Monte Carlo solvers for BSDEs with random terminal time and stochastic monotone drivers."""

__version__ = "0.1.0"

from .core import (CoefficientTrace, GeneratorSpec, SolutionEstimate, TerminalCondition, TerminalTime,
                   TimeGrid, WeightedNorms, WeightParams, cumulative_weight, make_grid)
from .errors import (CFLError, ConfigurationError, DivergenceError, InvariantError, NonlinearSolveError,
                     RegressionError, SimulationError, SolverError)
from .paths import (DomainSpec, PathEnsemble, SdeSpec, detect_exit, euler_maruyama, exp_moment_check,
                    simulate_brownian)
from .regression import RegressionBasis
from .bsde_solver import (SolverSettings, backward_sweep, contraction_ratios, picard_solve, residual_check,
                          validate_assumptions)
from .transforms import (clamp_q, clamped_data_generator, exp_gap, mollify_generator, truncated_generator,
                         truncated_terminal, truncation_theta)
from .oracle import fd_elliptic, fd_parabolic, linear_bsde_pathwise, weight_condition_check
from .estimates import apriori_check, continuous_dependence, stability_sequence, weighted_norms
from .feynman_kac import (PdeProblemSpec, growth_bound_check, solve_elliptic, solve_parabolic,
                          solve_table)
from .fixtures import FIXTURES, get_fixture

__all__ = [name for name in dir() if not name.startswith("_")]
