"""Shared domain types: time grids, terminal times, weights, generators and solutions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from .errors import ConfigurationError, InvariantError


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``start + i * t_cap / n_steps`` for ``i = 0..n_steps``.

    ``start`` is zero unless a problem is posed from a later initial time
    (parabolic probes at ``t > 0``); ``t_cap`` is always the horizon length.
    """

    t_cap: float
    n_steps: int
    start: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.t_cap) or self.t_cap <= 0:
            raise ConfigurationError(f"t_cap must be positive, got {self.t_cap}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.t_cap / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return self.start + self.dt * np.arange(self.n_steps + 1)

    @property
    def end(self) -> float:
        return self.start + self.t_cap

    def time(self, i: int) -> float:
        return self.start + i * self.dt


def make_grid(t_cap: float, n_steps: int, start: float = 0.0) -> TimeGrid:
    return TimeGrid(float(t_cap), n_steps, float(start))


@dataclass(frozen=True)
class TerminalTime:
    """Per-path terminal index on a grid.

    kind is ``"deterministic"``, ``"exit_time"`` or ``"capped_infinite"``.
    ``truncation_mass`` is the fraction of paths whose terminal time lies
    beyond the grid (recorded for every non-deterministic kind).
    """

    kind: str
    per_path_index: np.ndarray
    n_steps: int
    truncation_mass: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("deterministic", "exit_time", "capped_infinite"):
            raise ConfigurationError(f"unknown terminal time kind {self.kind!r}")
        idx = np.asarray(self.per_path_index, dtype=np.int64)
        if idx.ndim != 1:
            raise ConfigurationError("per_path_index must be one-dimensional")
        if idx.size and (idx.min() < 0 or idx.max() > self.n_steps):
            raise InvariantError("per_path_index outside [0, N]")
        if self.kind == "deterministic" and np.any(idx != self.n_steps):
            raise InvariantError("deterministic terminal time must sit on the last node")
        if self.kind != "deterministic" and self.truncation_mass is None:
            raise InvariantError("truncation_mass is required for random terminal times")
        idx.setflags(write=False)
        object.__setattr__(self, "per_path_index", idx)

    @property
    def n_paths(self) -> int:
        return self.per_path_index.size

    @classmethod
    def deterministic(cls, grid: TimeGrid, n_paths: int) -> "TerminalTime":
        return cls("deterministic", np.full(n_paths, grid.n_steps), grid.n_steps, None, f"T={grid.end:g}")

    @classmethod
    def capped(cls, grid: TimeGrid, n_paths: int) -> "TerminalTime":
        """Infinite horizon represented by the grid cap; every path is truncated."""
        return cls("capped_infinite", np.full(n_paths, grid.n_steps), grid.n_steps, 1.0, "cap")


@dataclass(frozen=True)
class WeightParams:
    beta: float = 1.0
    rho: float = 2.0
    rho_bar: Optional[float] = None

    def __post_init__(self):
        if not self.beta >= 1:
            raise ConfigurationError("beta must be ≥ 1")
        if not self.rho > 1:
            raise ConfigurationError("rho must be > 1")
        rb = self.rho if self.rho_bar is None else self.rho_bar
        if not (1 < rb <= self.rho):
            raise ConfigurationError("rho_bar must lie in (1, rho]")
        object.__setattr__(self, "rho_bar", float(rb))

    def weight(self, mu, nu):
        return self.beta * np.asarray(mu) + 0.5 * self.rho * np.asarray(nu) ** 2


def cumulative_weight(a: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Left-Riemann running integral: ``cum[:, i] = sum_{j<i} a[:, j] * dt``."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != grid.n_steps + 1:
        raise ConfigurationError("trace length does not match grid")
    if np.any(a < 0):
        raise InvariantError("negative weight entry")
    cum = np.zeros_like(a)
    np.cumsum(a[:, :-1] * grid.dt, axis=1, out=cum[:, 1:])
    return cum


@dataclass(frozen=True)
class CoefficientTrace:
    """Coefficient processes on the grid, shape (n_paths or 1, N+1)."""

    mu: np.ndarray
    nu: np.ndarray
    a: np.ndarray
    cum_a: np.ndarray
    weights: WeightParams

    @classmethod
    def build(cls, mu, nu, weights: WeightParams, grid: TimeGrid) -> "CoefficientTrace":
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        nu = np.atleast_2d(np.asarray(nu, dtype=float))
        if np.any(mu < 0) or np.any(nu < 0):
            raise InvariantError("mu and nu must be nonnegative")
        mu, nu = np.broadcast_arrays(mu, nu)
        a = weights.weight(mu, nu)
        return cls(_frozen(mu), _frozen(nu), _frozen(a), _frozen(cumulative_weight(a, grid)), weights)

    def with_weights(self, weights: WeightParams, grid: TimeGrid) -> "CoefficientTrace":
        return CoefficientTrace.build(self.mu, self.nu, weights, grid)


def evaluate_coefficients(coeff: Callable, states: np.ndarray, grid: TimeGrid):
    """Apply ``coeff(t, x) -> (mu, nu)`` node by node.

    Returns arrays of shape (1, N+1) when the rule is state-free, otherwise
    (n_paths, N+1); this keeps constant-coefficient traces cheap on long grids.
    """
    n = states.shape[0]
    mus, nus = [], []
    for i, t in enumerate(grid.nodes):
        m, v = coeff(t, states[:, i])
        mus.append(np.asarray(m, dtype=float).reshape(-1))
        nus.append(np.asarray(v, dtype=float).reshape(-1))
    if all(m.size == 1 for m in mus + nus):
        return np.concatenate(mus)[None, :], np.concatenate(nus)[None, :]
    mu = np.stack([np.broadcast_to(m, (n,)) for m in mus], axis=1)
    nu = np.stack([np.broadcast_to(v, (n,)) for v in nus], axis=1)
    return mu, nu


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver ``g(t, x, y, z)`` with its declared structure.

    ``fn`` is vectorised over paths: ``x`` is (n, l), ``y`` is (n, k), ``z`` is
    (n, k, d) and the result is (n, k). When ``uses_alpha`` is set, ``fn`` takes
    a fifth argument with the per-path value of the alpha process.

    ``coeff(t, x)`` returns the declared monotonicity and Lipschitz
    coefficients (mu, nu), either scalars or per-path arrays. ``alpha`` maps
    ``(grid, states, mu_trace, weights)`` to a (n, N+1) non-increasing process
    in (0, 1]. ``f_bound(t, x)`` is the growth process used by the a priori
    bounds and ``growth_envelope(t, r)`` an optional bound on
    ``sup_{|y| <= r} |g(t, y, 0) - g(t, 0, 0)|``.
    """

    fn: Callable
    coeff: Callable
    k: int = 1
    d: int = 1
    alpha: Optional[Callable] = None
    f_bound: Optional[Callable] = None
    growth_envelope: Optional[Callable] = None
    z_free: bool = False
    uses_alpha: bool = False
    name: str = "generator"

    def eval(self, t, x, y, z, alpha=None):
        if self.uses_alpha:
            if alpha is None:
                raise ConfigurationError(f"{self.name} needs alpha values")
            return self.fn(t, x, y, z, alpha)
        return self.fn(t, x, y, z)

    def coefficient_trace(self, states: np.ndarray, grid: TimeGrid, weights: WeightParams) -> CoefficientTrace:
        mu, nu = evaluate_coefficients(self.coeff, states, grid)
        return CoefficientTrace.build(mu, nu, weights, grid)

    def alpha_trace(self, states: np.ndarray, grid: TimeGrid, trace: CoefficientTrace) -> Optional[np.ndarray]:
        if self.alpha is None:
            return None
        al = np.asarray(self.alpha(grid, states, trace.mu, trace.weights), dtype=float)
        al = np.broadcast_to(al, (states.shape[0], grid.n_steps + 1))
        if np.any(al <= 0) or np.any(al > 1):
            raise InvariantError("alpha must lie in (0, 1]")
        if np.any(np.diff(al, axis=1) > 1e-15):
            raise InvariantError("alpha must be non-increasing along paths")
        return al

    def replace(self, **changes) -> "GeneratorSpec":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal value ``xi = fn(ens, tau) -> (n, k)``.

    ``exp_affine = (A, gamma, kappa)`` declares ``xi = A exp(gamma B_T + kappa T)``
    for a one-dimensional Brownian path; ``A`` alone (gamma = kappa = 0) is a
    deterministic constant. The linear oracle uses this to return exact paths.
    """

    fn: Callable
    k: int = 1
    exp_affine: Optional[tuple] = None
    name: str = "xi"

    def __call__(self, ens, tau) -> np.ndarray:
        out = np.asarray(self.fn(ens, tau), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        if out.shape != (ens.n_paths, self.k):
            raise ConfigurationError(f"{self.name} returned shape {out.shape}, expected {(ens.n_paths, self.k)}")
        return out

    @classmethod
    def constant(cls, c, k: int = 1) -> "TerminalCondition":
        c = np.broadcast_to(np.asarray(c, dtype=float), (k,)).copy()
        return cls(lambda ens, tau: np.tile(c, (ens.n_paths, 1)), k,
                   (float(c[0]), 0.0, 0.0) if k == 1 else None, f"const{c.tolist()}")

    @classmethod
    def of_state(cls, h: Callable, k: int = 1, name: str = "h(X_tau)") -> "TerminalCondition":
        """``xi = h(X_tau)`` with ``h`` mapping (n, l) states to (n,) or (n, k)."""

        def fn(ens, tau):
            x = ens.state[np.arange(ens.n_paths), tau.per_path_index]
            return h(x)

        return cls(fn, k, None, name)


@dataclass(frozen=True)
class SolutionEstimate:
    y: np.ndarray              # (n, N+1, k)
    z: np.ndarray              # (n, N+1, k, d)
    xi: np.ndarray             # (n, k)
    per_path_index: np.ndarray
    regression_coeffs: list = field(repr=False, default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def y0(self) -> np.ndarray:
        """Root value; the root state is shared so every path carries the same y."""
        return self.y[:, 0].mean(axis=0)

    def check_freeze(self) -> bool:
        n, np1 = self.y.shape[:2]
        after = np.arange(np1)[None, :] >= self.per_path_index[:, None]
        ok_y = np.all(self.y[after] == np.repeat(self.xi, (after).sum(axis=1), axis=0))
        ok_z = np.all(self.z[after] == 0.0)
        return bool(ok_y and ok_z)


@dataclass(frozen=True)
class WeightedNorms:
    xi_norm_sq: float
    y_norm_sq: float
    z_norm_sq: float
    std_err: tuple
    n_paths: int

    def __post_init__(self):
        vals = (self.xi_norm_sq, self.y_norm_sq, self.z_norm_sq) + tuple(self.std_err)
        if any(v < 0 for v in vals):
            raise InvariantError("weighted norms and their errors are nonnegative")


# --- alpha recipes -------------------------------------------------------

def running_integral(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    values = np.atleast_2d(values)
    out = np.zeros(values.shape)
    np.cumsum(values[:, :-1] * grid.dt, axis=1, out=out[:, 1:])
    return out


def wlog_rescale(alpha: np.ndarray, mu: np.ndarray, grid: TimeGrid, beta: float) -> np.ndarray:
    """Replace alpha by ``min(alpha, exp(-beta * int mu))``; stays non-increasing."""
    return np.minimum(alpha, np.exp(-beta * running_integral(mu, grid)))


def alpha_constant(c: float = 1.0, rescale: bool = True) -> Callable:
    if not 0 < c <= 1:
        raise ConfigurationError("alpha constant must lie in (0, 1]")

    def rule(grid, states, mu, weights):
        al = np.full((states.shape[0], grid.n_steps + 1), float(c))
        return wlog_rescale(al, mu, grid, weights.beta) if rescale else al

    return rule


def alpha_sup_weighted_mu(rescale: bool = True) -> Callable:
    """``alpha_t = e^{-t} / (1 + sup_{s<=t} e^{beta int_0^s mu} mu_s)``."""

    def rule(grid, states, mu, weights):
        mu = np.broadcast_to(mu, (states.shape[0], grid.n_steps + 1))
        run = np.maximum.accumulate(np.exp(weights.beta * running_integral(mu, grid)) * mu, axis=1)
        al = np.exp(-(grid.nodes - grid.start))[None, :] / (1.0 + run)
        return wlog_rescale(al, mu, grid, weights.beta) if rescale else al

    return rule


def alpha_quartic_state(rescale: bool = True) -> Callable:
    """``alpha_t = lambda_t / sup_{s<=t} (1 + |x_s|)^4`` with ``lambda_t = e^{-beta int mu - t}``."""

    def rule(grid, states, mu, weights):
        mu = np.broadcast_to(mu, (states.shape[0], grid.n_steps + 1))
        lam = np.exp(-weights.beta * running_integral(mu, grid) - (grid.nodes - grid.start)[None, :])
        r = np.linalg.norm(states, axis=-1)
        al = lam / np.maximum.accumulate((1.0 + r) ** 4, axis=1)
        return wlog_rescale(al, mu, grid, weights.beta) if rescale else al

    return rule


ALPHA_PRESETS = {
    "constant": alpha_constant,
    "sup-weighted-mu": alpha_sup_weighted_mu,
    "quartic-state": alpha_quartic_state,
}


def describe(obj: Any) -> Any:
    """JSON-friendly snapshot of settings objects."""
    if hasattr(obj, "__dataclass_fields__"):
        return {k: describe(getattr(obj, k)) for k in obj.__dataclass_fields__ if not callable(getattr(obj, k))}
    if isinstance(obj, (list, tuple)):
        return [describe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
