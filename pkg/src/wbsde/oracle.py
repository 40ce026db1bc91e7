"""Reference solutions: the linear BSDE in closed form and 1-d finite differences."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .core import CoefficientTrace, TerminalCondition, TerminalTime, TimeGrid, running_integral
from .errors import CFLError, ConfigurationError, NonlinearSolveError
from .paths import PathEnsemble, derive_seed, simulate_brownian


@dataclass
class OracleSolution:
    y: np.ndarray                 # (n, N+1)
    z: Optional[np.ndarray]       # (n, N+1), None for nested estimates
    explicit: bool
    std_err: Optional[np.ndarray] = None


def _deterministic(arr: np.ndarray) -> bool:
    return arr.shape[0] == 1 or bool(np.all(arr == arr[:1]))


def linear_bsde_pathwise(trace: CoefficientTrace, xi: TerminalCondition, ens: PathEnsemble,
                         grid: TimeGrid, m: int = 256, seed: int = 0,
                         coeff: Optional[Callable] = None) -> OracleSolution:
    """y_t = E[xi exp(int_t^T mu + int_t^T nu dB - 1/2 int_t^T nu^2) | F_t] for k = d = 1.

    Exact when the coefficients are deterministic and ``xi`` declares an
    exponential-affine form ``A exp(gamma B_T + kappa T)``. Otherwise each
    (path, node) gets a nested Monte Carlo estimate from ``m`` antithetic
    continuations of the Brownian path; the state is taken to be the Brownian
    path itself and ``coeff(t, x)`` re-evaluates the coefficients on the
    continuations.
    """
    if ens.d != 1 or xi.k != 1:
        raise ConfigurationError("the linear oracle is one-dimensional")
    n, N, dt = ens.n_paths, grid.n_steps, grid.dt
    B = ens.brownian()[:, :, 0]
    mu = np.broadcast_to(trace.mu, (n, N + 1))
    nu = np.broadcast_to(trace.nu, (n, N + 1))
    if xi.exp_affine is not None and _deterministic(trace.mu) and _deterministic(trace.nu):
        A, gamma, kappa = xi.exp_affine
        rate = mu[0] - 0.5 * nu[0] ** 2 + 0.5 * (gamma + nu[0]) ** 2
        tail = np.concatenate([np.cumsum((rate[:-1] * dt)[::-1])[::-1], [0.0]])
        y = A * np.exp(gamma * B + kappa * grid.t_cap + tail[None, :])
        return OracleSolution(y, gamma * y, True)
    if m <= 0:
        raise ConfigurationError("nested budget m = 0 with a terminal value that is not explicit")
    if coeff is None:
        raise ConfigurationError("nested estimation needs the coefficient rule")
    half = max(1, m // 2)
    y = np.empty((n, N + 1))
    se = np.zeros((n, N + 1))
    tau = TerminalTime.deterministic(grid, 2 * half)
    for p in range(n):
        pid = int(ens.substream_ids[p])
        one = ens.subset(slice(p, p + 1))
        y[p, N] = xi(one, TerminalTime.deterministic(grid, 1))[0, 0]
        for i in range(N):
            inner = simulate_brownian(TimeGrid((N - i) * dt, N - i), half, 1, derive_seed(seed, pid, i))
            cont = np.concatenate([inner.dB, -inner.dB])[:, :, 0]
            dB = np.concatenate([np.repeat(ens.dB[p:p + 1, :i, 0], 2 * half, axis=0), cont], axis=1)
            path = np.zeros((2 * half, N + 1))
            np.cumsum(dB, axis=1, out=path[:, 1:])
            sub = PathEnsemble(grid, dB[:, :, None], path[:, :, None], ens.seed, np.arange(2 * half))
            mus, nus = [], []
            for j in range(N + 1):
                mj, vj = coeff(grid.time(j), path[:, j:j + 1])
                mus.append(np.broadcast_to(np.asarray(mj, dtype=float), (2 * half,)))
                nus.append(np.broadcast_to(np.asarray(vj, dtype=float), (2 * half,)))
            mu_s, nu_s = np.stack(mus, 1), np.stack(nus, 1)
            expo = np.sum((mu_s[:, i:N] - 0.5 * nu_s[:, i:N] ** 2) * dt + nu_s[:, i:N] * dB[:, i:N], axis=1)
            vals = xi(sub, tau)[:, 0] * np.exp(expo)
            pair = 0.5 * (vals[:half] + vals[half:])
            y[p, i] = pair.mean()
            se[p, i] = pair.std(ddof=1) / math.sqrt(half) if half > 1 else 0.0
    return OracleSolution(y, None, False, se)


@dataclass
class WeightCheck:
    value: float
    std_err: float
    max_share: float
    heavy_tail: bool
    finite: bool


def weight_condition_check(trace: CoefficientTrace, xi_values: np.ndarray, tau: TerminalTime,
                           grid: TimeGrid, beta_t: float, rho_t: float) -> WeightCheck:
    """Monte Carlo estimate of E[|xi|^2 exp(2 beta int_0^tau mu + rho int_0^tau nu^2)]."""
    if beta_t < 1 or rho_t < 1:
        raise ConfigurationError("beta and rho for the weight check must be >= 1")
    n = tau.n_paths
    mu = np.broadcast_to(trace.mu, (n, grid.n_steps + 1))
    nu = np.broadcast_to(trace.nu, (n, grid.n_steps + 1))
    expo = 2 * beta_t * running_integral(mu, grid) + rho_t * running_integral(nu ** 2, grid)
    e_tau = expo[np.arange(n), tau.per_path_index]
    xi2 = np.sum(np.atleast_2d(np.asarray(xi_values, dtype=float).reshape(n, -1)) ** 2, axis=1)
    vals = xi2 * np.exp(e_tau)
    total = vals.sum()
    share = float(vals.max() / total) if total > 0 else 0.0
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return WeightCheck(float(vals.mean()), se, share, share > 0.5, bool(np.isfinite(total)))


def running_sup_diagnostic(y: np.ndarray, trace: CoefficientTrace, grid: TimeGrid,
                           beta_t: float, rho_t: float, sizes) -> list:
    """Sample means of sup_i exp(2 beta int mu + rho int nu^2) |y_i|^2 over growing path counts.

    An infinite expectation shows up as estimates that keep growing as the
    sample doubles instead of settling.
    """
    n = y.shape[0]
    mu = np.broadcast_to(trace.mu, (n, grid.n_steps + 1))
    nu = np.broadcast_to(trace.nu, (n, grid.n_steps + 1))
    w = np.exp(2 * beta_t * running_integral(mu, grid) + rho_t * running_integral(nu ** 2, grid))
    per_path = np.max(w * np.abs(y.reshape(n, grid.n_steps + 1, -1)).sum(axis=2) ** 2, axis=1)
    return [(int(s), float(per_path[:s].mean()), float(per_path[:s].std(ddof=1) / math.sqrt(s)))
            for s in sizes if s <= n]


# --- finite differences -------------------------------------------------


@dataclass
class FdSolution:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray            # (len(t), len(x))
    residual: float = 0.0
    iterations: int = 0

    def at(self, x, t=None) -> np.ndarray:
        row = 0 if t is None else int(np.argmin(np.abs(self.t - t)))
        return np.interp(np.asarray(x, dtype=float), self.x, self.u[row])


def _coeffs_1d(sde, t, x):
    col = x[:, None]
    b = np.broadcast_to(sde.drift(t, col), (x.size, 1))[:, 0]
    s = np.broadcast_to(sde.diffusion(t, col), (x.size, 1, 1))[:, 0, 0]
    return np.asarray(b, dtype=float), np.asarray(s, dtype=float)


def _g_1d(g, t, x, u, p):
    return g.eval(t, x[:, None], u[:, None], p[:, None, None])[:, 0]


def fd_parabolic(pde, nx: int = 200, nt: Optional[int] = None, x_max: float = 3.0,
                 boundary: Optional[Callable] = None) -> FdSolution:
    """Explicit backward scheme for u_t + sigma^2/2 u_xx + b u_x + g(t,x,u,u_x sigma) = 0.

    ``pde`` needs ``sde``, ``h``, ``g`` and ``horizon``. The window is
    [-x_max, x_max] with Dirichlet data ``boundary(t, x)`` (default ``h``).
    """
    T = float(pde.horizon)
    x = np.linspace(-x_max, x_max, nx + 1)
    dx = x[1] - x[0]
    smax = max(float(np.max(_coeffs_1d(pde.sde, tt, x)[1] ** 2)) for tt in np.linspace(0, T, 5))
    need = max(1, math.ceil(T * smax / dx ** 2 * (1 + 1e-12)))
    if nt is None:
        nt = need
    if nt < need:
        raise CFLError(need)
    dt = T / nt
    t = np.linspace(0.0, T, nt + 1)
    u = np.empty((nt + 1, nx + 1))
    u[-1] = np.asarray(pde.h(x[:, None]), dtype=float).reshape(-1)
    bnd = boundary or (lambda tt, xx: np.asarray(pde.h(xx[:, None]), dtype=float).reshape(-1))
    for n in range(nt, 0, -1):
        cur = u[n]
        b, s = _coeffs_1d(pde.sde, t[n], x[1:-1])
        uxx = (cur[2:] - 2 * cur[1:-1] + cur[:-2]) / dx ** 2
        ux = (cur[2:] - cur[:-2]) / (2 * dx)
        gv = _g_1d(pde.g, t[n], x[1:-1], cur[1:-1], ux * s)
        u[n - 1, 1:-1] = cur[1:-1] + dt * (0.5 * s ** 2 * uxx + b * ux + gv)
        ends = bnd(t[n - 1], x[[0, -1]])
        u[n - 1, 0], u[n - 1, -1] = ends[0], ends[-1]
    return FdSolution(t, x, u)


def fd_elliptic(pde, nx: int = 400, damping: float = 1.0, max_iter: int = 200,
                tol: float = 1e-10) -> FdSolution:
    """Central differences for sigma^2/2 u'' + b u' + g(x,u,u' sigma) = 0 on an interval.

    Nonlinear drivers are handled by a damped fixed point that treats the
    u-derivative of g (by finite differences) implicitly on the diagonal.
    Convergence is declared when the max-norm residual of the discrete
    equations falls below ``tol``.
    """
    box = pde.domain.bounding_box
    if box is None or len(box[0]) != 1:
        raise ConfigurationError("fd_elliptic needs a one-dimensional interval domain")
    a, bb = float(box[0][0]), float(box[1][0])
    x = np.linspace(a, bb, nx + 1)
    dx = x[1] - x[0]
    xi_ = x[1:-1]
    drift, s = _coeffs_1d(pde.sde, 0.0, xi_)
    lo = 0.5 * s ** 2 / dx ** 2 - drift / (2 * dx)
    di = -s ** 2 / dx ** 2
    up = 0.5 * s ** 2 / dx ** 2 + drift / (2 * dx)
    hb = np.asarray(pde.h(x[[0, -1]][:, None]), dtype=float).reshape(-1)
    u = np.zeros(nx + 1)
    u[0], u[-1] = hb[0], hb[-1]
    history = []

    def apply(v):
        return lo * v[:-2] + di * v[1:-1] + up * v[2:]

    def gval(v):
        p = (v[2:] - v[:-2]) / (2 * dx) * s
        return _g_1d(pde.g, 0.0, xi_, v[1:-1], p)

    for it in range(1, max_iter + 1):
        gv = gval(u)
        eps = 1e-7 * (1 + np.abs(u[1:-1]))
        pert = u.copy()
        pert[1:-1] += eps
        jd = np.minimum((gval(pert) - gv) / eps, 0.0)
        rhs = -gv + jd * u[1:-1]
        rhs[0] -= lo[0] * u[0]
        rhs[-1] -= up[-1] * u[-1]
        band = np.zeros((3, nx - 1))
        band[0, 1:] = up[:-1]
        band[1] = di + jd
        band[2, :-1] = lo[1:]
        new = scipy.linalg.solve_banded((1, 1), band, rhs)
        u[1:-1] = (1 - damping) * u[1:-1] + damping * new
        res = float(np.max(np.abs(apply(u) + gval(u))))
        history.append(res)
        if res < tol:
            return FdSolution(np.array([0.0]), x, u[None, :], res, it)
        if not np.isfinite(res):
            break
    raise NonlinearSolveError("elliptic fixed point did not converge", history)


def write_mesh_csv(sol: FdSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "u"])
        for i, tt in enumerate(sol.t):
            for xx, uu in zip(sol.x, sol.u[i]):
                w.writerow([repr(float(tt)), repr(float(xx)), repr(float(uu))])
