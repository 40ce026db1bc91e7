"""Catalogue of generator fixtures with their declared coefficients and alpha recipes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (GeneratorSpec, TerminalCondition, TerminalTime, TimeGrid, WeightParams,
                   alpha_constant, alpha_quartic_state, running_integral)
from .errors import ConfigurationError
from .paths import DomainSpec, SdeSpec, detect_exit, euler_maruyama, simulate_brownian


@dataclass
class Problem:
    fixture: "Fixture"
    generator: GeneratorSpec
    xi: TerminalCondition
    ens: object
    tau: TerminalTime
    weights: WeightParams

    @property
    def grid(self) -> TimeGrid:
        return self.ens.grid


@dataclass(frozen=True)
class Fixture:
    id: str
    make: Callable                 # weights -> (GeneratorSpec, TerminalCondition)
    sde: SdeSpec
    recipe: str
    exercises: tuple
    x0: float = 0.0
    horizon: float = 1.0
    terminal: str = "deterministic"   # or "exit", "capped"
    domain: Optional[DomainSpec] = None
    implicit: bool = False
    linear: bool = False          # closed-form oracle available
    notes: str = ""

    def build(self, n_paths: int, n_steps: int, seed: int, weights: Optional[WeightParams] = None,
              workers: int = 1, horizon: Optional[float] = None) -> Problem:
        weights = weights or WeightParams()
        grid = TimeGrid(horizon or self.horizon, n_steps)
        ens = simulate_brownian(grid, n_paths, self.sde.d, seed, workers)
        ens = euler_maruyama(self.sde, np.full(self.sde.l, self.x0), grid, ens)
        if self.terminal == "deterministic":
            tau = TerminalTime.deterministic(grid, n_paths)
        elif self.terminal == "exit":
            tau = detect_exit(ens.state, self.domain, grid)
        else:
            tau = TerminalTime.capped(grid, n_paths)
        g, xi = self.make(weights)
        return Problem(self, g, xi, ens, tau, weights)


def _bnorm(x, d=1):
    return np.linalg.norm(x[:, :d], axis=1)


def _discounted(coeff: Callable, weights: WeightParams, factor: Callable, k: int = 1, name: str = "xi"):
    """``xi = exp(-int_0^tau a dt) * factor(X_tau)`` with a from the declared coefficients."""

    def fn(ens, tau):
        grid = ens.grid
        mus, nus = [], []
        for i, t in enumerate(grid.nodes):
            m, v = coeff(t, ens.state[:, i])
            mus.append(np.broadcast_to(np.asarray(m, dtype=float), (ens.n_paths,)))
            nus.append(np.broadcast_to(np.asarray(v, dtype=float), (ens.n_paths,)))
        a = weights.weight(np.stack(mus, 1), np.stack(nus, 1))
        cum = running_integral(a, grid)
        rows = np.arange(ens.n_paths)
        x_tau = ens.state[rows, tau.per_path_index]
        val = np.asarray(factor(x_tau), dtype=float).reshape(ens.n_paths, k)
        return np.exp(-cum[rows, tau.per_path_index])[:, None] * val

    return TerminalCondition(fn, k, None, name)


# --- individual fixtures -------------------------------------------------


def _zero(weights):
    g = GeneratorSpec(lambda t, x, y, z: np.zeros_like(y), lambda t, x: (0.0, 0.0),
                      f_bound=lambda t, x: 0.0, z_free=True, name="zero")
    return g, TerminalCondition.constant(0.0)


def linear_generator(mu0: float = 0.5, nu0: float = 0.3, shift: float = 0.0, alpha=None) -> GeneratorSpec:
    """``g = mu0 y + nu0 z + shift`` in one dimension."""
    return GeneratorSpec(lambda t, x, y, z: mu0 * y + nu0 * z[:, :, 0] + shift,
                         lambda t, x: (mu0, nu0), alpha=alpha,
                         f_bound=lambda t, x: abs(shift), name=f"linear({mu0:g},{nu0:g})")


def _linear(weights):
    return linear_generator(alpha=alpha_constant(1.0)), TerminalCondition.constant(1.0)


def _linear_cosine(weights):
    return linear_generator(alpha=alpha_constant(1.0)), TerminalCondition.of_state(
        lambda x: 2.0 * np.cos(x[:, 0]), name="2cos(B_T)")


def _counterexample(weights, b: float = 1.0):
    g = GeneratorSpec(lambda t, x, y, z: b * z[:, :, 0], lambda t, x: (0.0, b),
                      f_bound=lambda t, x: 0.0, name=f"counterexample(b={b:g})")

    def fn(ens, tau):
        B = ens.brownian()[:, :, 0]
        rows = np.arange(ens.n_paths)
        T = ens.grid.nodes[tau.per_path_index]
        return np.exp(b * B[rows, tau.per_path_index] - 1.5 * b * b * T)[:, None]

    return g, TerminalCondition(fn, 1, (1.0, b, -1.5 * b * b), "exp(bB_T - 1.5 b^2 T)")


def _heat(weights):
    g = GeneratorSpec(lambda t, x, y, z: np.zeros_like(y), lambda t, x: (0.0, 0.0),
                      f_bound=lambda t, x: 0.0, z_free=True, name="heat")
    return g, TerminalCondition.of_state(lambda x: x[:, 0] ** 2)


def _exp_cubic(weights):
    def fn(t, x, y, z):
        c = _bnorm(x) ** 3
        zn = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)
        return np.exp(-c[:, None] * y) + zn[:, None]

    def alpha(grid, states, mu, w):
        return 1.0 / (1.0 + np.maximum.accumulate(np.linalg.norm(states, axis=-1) ** 3, axis=1))

    g = GeneratorSpec(fn, lambda t, x: (0.0, 1.0), alpha=alpha, f_bound=lambda t, x: 1.0, name="exp-cubic")
    return g, TerminalCondition.of_state(lambda x: np.sin(x[:, 0]), name="sin(B_tau)")


def exp_quartic_generator() -> GeneratorSpec:
    def fn(t, x, y, z):
        b = _bnorm(x)[:, None]
        zn = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)[:, None]
        return np.exp(-b ** 4 * y) + b * (np.abs(y) + zn) - 1.0

    coeff = lambda t, x: (_bnorm(x), _bnorm(x))
    return GeneratorSpec(fn, coeff, alpha=alpha_quartic_state(rescale=False),
                         f_bound=lambda t, x: 0.0, name="exp-quartic")


def _exp_quartic(weights):
    g = exp_quartic_generator()
    return g, _discounted(g.coeff, weights, lambda x: x[:, 0], name="exp(-int a) B_tau")


def _infinite_horizon(weights):
    rho = weights.rho

    def lam(t, x):
        return np.exp(-0.5 * rho * x[:, 1] - t)

    def nu(t, x):
        return np.sqrt(np.abs(x[:, 0]) * (t <= 1.0) + 1.0 / (1.0 + t * t))

    def fn(t, x, y, z):
        zn = np.abs(z[:, :, 0])
        return lam(t, x)[:, None] * np.exp(np.maximum(-y, 0.0)) + nu(t, x)[:, None] * np.sin(zn)

    g = GeneratorSpec(fn, lambda t, x: (0.0, nu(t, x)), f_bound=lambda t, x: lam(t, x), name="infinite-horizon")
    return g, _discounted(g.coeff, weights, lambda x: np.tanh(x[:, 0]), name="exp(-int a) tanh(B)")


def _sixth_power(weights, sigma_time: float = 1.0):
    def on(t, x):
        return np.abs(x[:, 0]) * (t <= sigma_time)

    def fn(t, x, y, z):
        b6 = (np.abs(x[:, 0]) ** 6)[:, None]
        return b6 * (1 - np.exp(np.maximum(y, 0.0))) + on(t, x)[:, None] * np.sin(y) \
            + np.sqrt(on(t, x))[:, None] * np.abs(z[:, :, 0])

    g = GeneratorSpec(fn, lambda t, x: (on(t, x), np.sqrt(on(t, x))), f_bound=lambda t, x: 0.0, name="sixth-power")
    return g, _discounted(g.coeff, weights, lambda x: np.sin(x[:, 0]), name="exp(-int a) sin(B_tau)")


def polynomial_monotone_generator(nu_scale: float = np.sqrt(2.0), d: int = 2) -> GeneratorSpec:
    """Two-dimensional polynomial-monotone driver.

    The z-part ``|B| (sin|z|, |z|)`` has Lipschitz constant sqrt(2)|B| (two
    components each 1-Lipschitz in |z|, both active near z = 0), so that is
    the declared nu by default; ``nu_scale=1`` reproduces the smaller
    constant for the validator to reject.
    """

    def fn(t, x, y, z):
        b = _bnorm(x, d)
        zn = np.linalg.norm(z.reshape(z.shape[0], -1), axis=1)
        poly = np.stack([-y[:, 0] ** 5 + y[:, 1], -y[:, 1] ** 3 - y[:, 0]], axis=1)
        return (b ** 3)[:, None] * poly + b[:, None] * np.stack([np.sin(zn), zn], axis=1)

    coeff = lambda t, x: (_bnorm(x, d) ** 3, nu_scale * _bnorm(x, d))
    return GeneratorSpec(fn, coeff, k=2, d=d, f_bound=lambda t, x: 0.0, name="polynomial-monotone")


def _polynomial_monotone(weights):
    g = polynomial_monotone_generator()
    return g, _discounted(g.coeff, weights, lambda x: x[:, :2], k=2, name="exp(-int a) B_tau")


def _elliptic(weights):
    g = GeneratorSpec(lambda t, x, y, z: np.full_like(y, 2.0), lambda t, x: (0.0, 0.0),
                      f_bound=lambda t, x: 2.0, z_free=True, name="const2")
    return g, TerminalCondition.of_state(lambda x: np.zeros(x.shape[0]), name="h=0")


def _running_abs_sde():
    """State (B, int_0^t |B| ds) for drivers that read a running integral."""
    return SdeSpec(lambda t, x: np.stack([np.zeros(x.shape[0]), np.abs(x[:, 0])], axis=1),
                   lambda t, x: np.array([[1.0], [0.0]]), 2, 1, 1.0, "(B, int|B|)")


FIXTURES = {
    f.id: f for f in [
        Fixture("zero", _zero, SdeSpec.brownian(), "mu=0, nu=0, alpha=none, xi=0", ("a priori bounds",)),
        Fixture("linear-constant-coeff", _linear, SdeSpec.brownian(),
                "g=0.5y+0.3z, mu=0.5, nu=0.3, alpha=1 rescaled, xi=1",
                ("closed-form linear solution", "a priori bounds", "Picard contraction",
                 "continuous dependence"), linear=True),
        Fixture("linear-cosine-terminal", _linear_cosine, SdeSpec.brownian(),
                "g=0.5y+0.3z, mu=0.5, nu=0.3, alpha=1 rescaled, xi=2cos(B_T)",
                ("stability under truncated data", "a priori bounds")),
        Fixture("motivational-counterexample-rho1", _counterexample, SdeSpec.brownian(),
                "g=bz, mu=0, nu=b=1, xi=exp(bB_T-1.5b^2T)",
                ("weight condition with rho=1", "pathwise closed form"), linear=True),
        Fixture("heat", _heat, SdeSpec.brownian(), "g=0, h=x^2, X=B", ("parabolic Feynman-Kac",)),
        Fixture("ex3.8-exp-cubic", _exp_cubic, SdeSpec.brownian(),
                "g=exp(-|B|^3 y)+|z|, mu=0, nu=1, alpha=1/(1+sup|B|^3)",
                ("existence under general growth with alpha",),
                terminal="exit", domain=DomainSpec.interval(-1.5, 1.5), implicit=True,
                notes="tau = exit from [-1.5,1.5] capped at T=1"),
        Fixture("ex3.9-exp-quartic", _exp_quartic, SdeSpec.brownian(),
                "g=exp(-|B|^4 y)+|B|(|y|+|z|)-1, mu=nu=|B|, alpha=e^{-beta int mu - t}/sup(1+|B|)^4",
                ("existence and uniqueness", "a priori bounds"), implicit=True),
        Fixture("ex3.10-infinite-horizon", _infinite_horizon, _running_abs_sde(),
                "g=e^{-rho/2 int|B| - t}e^{y^-}+nu sin|z|, mu=0, nu=sqrt(|B|1_{t<=1}+1/(1+t^2))",
                ("infinite horizon via cap",), horizon=4.0, terminal="capped"),
        Fixture("ex3.11-sixth-power", _sixth_power, SdeSpec.brownian(),
                "g=|B|^6(1-e^{y^+})+|B|1_{t<=1}sin y+sqrt(|B|1_{t<=1})|z|, mu=|B|1_{t<=1}",
                ("random terminal time",), horizon=3.0, terminal="exit",
                domain=DomainSpec.interval(-2.0, 2.0), implicit=True),
        Fixture("ex3.12-polynomial-monotone", _polynomial_monotone, SdeSpec.brownian(2),
                "g=|B|^3(-y1^5+y2,-y2^3-y1)+|B|(sin|z|,|z|), mu=|B|^3, nu=sqrt(2)|B|",
                ("existence and uniqueness, k=2",), implicit=True),
        Fixture("elliptic-exit-time", _elliptic, SdeSpec.brownian(1, np.sqrt(2.0)),
                "g=2, h=0, X=sqrt(2)B on (-1,1)", ("elliptic Feynman-Kac",),
                horizon=2.5, terminal="exit", domain=DomainSpec.interval(-1.0, 1.0)),
    ]
}


def get_fixture(fid: str) -> Fixture:
    try:
        return FIXTURES[fid]
    except KeyError:
        raise ConfigurationError(f"unknown fixture {fid!r}; known: {', '.join(FIXTURES)}") from None


def catalogue() -> list:
    return [(f.id, f.recipe, ", ".join(f.exercises)) for f in FIXTURES.values()]


# --- PDE presets for the Feynman-Kac harness ------------------------------


def _pde_presets():
    from .feynman_kac import PdeProblemSpec

    heat = PdeProblemSpec(
        SdeSpec.brownian(), lambda x: x[:, 0] ** 2,
        GeneratorSpec(lambda t, x, y, z: np.zeros_like(y), lambda t, x: (0.0, 0.0), z_free=True, name="zero"),
        horizon=1.0, K=np.e, p=2.0, q=1.0,
        probes=((0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 0.0), (0.5, 1.0)), name="heat")
    elliptic = PdeProblemSpec(
        SdeSpec.brownian(1, np.sqrt(2.0)), lambda x: np.zeros(x.shape[0]),
        GeneratorSpec(lambda t, x, y, z: np.full_like(y, 2.0), lambda t, x: (0.0, 0.0), z_free=True, name="const2"),
        horizon=np.inf, K=2.0, p=0.0, q=1.0,
        probes=tuple((np.round(np.arange(-0.8, 0.81, 0.2), 10) + 0.0).tolist()),
        domain=DomainSpec.interval(-1.0, 1.0), t_cap=2.5, name="elliptic-exit-time")
    return {
        "heat": (heat, lambda probe: probe[1] ** 2 + heat.horizon - probe[0]),
        "elliptic-exit-time": (elliptic, lambda x: 1.0 - float(np.asarray(x).ravel()[0]) ** 2),
    }


def get_pde_preset(name: str):
    """(PdeProblemSpec, closed-form oracle) for a named PDE preset."""
    presets = _pde_presets()
    if name not in presets:
        raise ConfigurationError(f"unknown PDE preset {name!r}; known: {', '.join(presets)}")
    return presets[name]
