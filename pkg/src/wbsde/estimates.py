"""Weighted norms and statistical checks of the a priori, dependence and stability bounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import CoefficientTrace, GeneratorSpec, SolutionEstimate, WeightedNorms, WeightParams
from .errors import ConfigurationError


def _mean_se(v: np.ndarray):
    n = v.size
    return float(v.mean()), (float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)


def _cum(trace: CoefficientTrace, n: int) -> np.ndarray:
    return np.broadcast_to(trace.cum_a, (n, trace.cum_a.shape[1]))


def path_norm_terms(y, z, xi, idx, cum_a, dt, start: int = 0):
    """Per-path (xi term, sup-Y term, Z term) with every sum restricted to nodes <= idx."""
    n, np1 = y.shape[:2]
    rows = np.arange(n)
    xi_t = np.exp(2 * cum_a[rows, idx]) * np.sum(np.reshape(xi, (n, -1)) ** 2, axis=1)
    sup = np.zeros(n)
    zt = np.zeros(n)
    for i in range(start, np1):
        live = idx >= i
        if not live.any():
            break
        r = np.flatnonzero(live)
        w = np.exp(2 * cum_a[r, i])
        sup[r] = np.maximum(sup[r], w * np.sum(y[r, i].reshape(r.size, -1) ** 2, axis=1))
        zr = r[idx[r] > i]
        if zr.size:
            zt[zr] += np.exp(2 * cum_a[zr, i]) * np.sum(z[zr, i].reshape(zr.size, -1) ** 2, axis=1) * dt
    return xi_t, sup, zt


def weighted_norms(est: SolutionEstimate, trace: CoefficientTrace, dt: float) -> WeightedNorms:
    """Monte Carlo estimates of the weighted terminal, sup-Y and integrated-Z norms.

    The sup is the per-path maximum over grid nodes, a lower bound of the
    continuous-time supremum.
    """
    n = est.y.shape[0]
    xi_t, sup, zt = path_norm_terms(est.y, est.z, est.xi, est.per_path_index, _cum(trace, n), dt)
    (a, sa), (b, sb), (c, sc) = _mean_se(xi_t), _mean_se(sup), _mean_se(zt)
    return WeightedNorms(a, b, c, (sa, sb, sc), n)


@dataclass
class CheckResult:
    check_id: str
    lhs: float
    rhs: float
    std_err: float
    passed: bool

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def paired_check(check_id: str, lhs_p: np.ndarray, rhs_p: np.ndarray, slack: float = 4.0) -> CheckResult:
    """PASS iff mean(lhs - rhs) <= slack * stderr of the paired difference."""
    diff = lhs_p - rhs_p
    m, se = _mean_se(diff)
    return CheckResult(check_id, float(lhs_p.mean()), float(rhs_p.mean()), se, bool(m <= slack * se))


def write_checks_csv(checks, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check_id", "lhs", "rhs", "stderr", "verdict"])
        for c in checks:
            w.writerow([c.check_id, repr(c.lhs), repr(c.rhs), repr(c.std_err), c.verdict])


def explicit_constant(rho_bar: float) -> float:
    return 4.0 * (2.0 + 33.0 * rho_bar / (rho_bar - 1.0)) ** 2


@dataclass
class AprioriReport:
    checks: list
    constants: dict
    smallest_C: dict
    weighted_a_term: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def by_id(self, check_id: str) -> CheckResult:
        return next(c for c in self.checks if c.check_id == check_id)


def apriori_check(est: SolutionEstimate, g: GeneratorSpec, ens, params: WeightParams,
                  trace: Optional[CoefficientTrace] = None, t_probe: float = 0.0,
                  r_probe: float = 0.0, slack: float = 4.0) -> AprioriReport:
    """Evaluate both sides of the four a priori inequalities at r = 0.

    Check ids: ``z-by-y`` bounds the Z norm by the sup-Y and driver terms,
    ``explicit-constant`` is the full bound with the middle term and the
    explicit constant, ``data-bound`` drops the middle term, and
    ``cross-term`` replaces the squared driver integral by the |y| f cross
    term.

    ``trace`` carries the bounding coefficients (mu-bar, nu-bar) and defaults
    to the generator's declared ones under ``params``. Sums start at the
    node of ``t_probe``; conditioning times r > 0 are not supported.
    """
    if g.f_bound is None:
        raise ConfigurationError(f"{g.name} declares no f_bound")
    if r_probe != 0.0:
        raise ConfigurationError("only the unconditional form (r = 0) is implemented")
    grid = ens.grid
    if trace is None:
        trace = g.coefficient_trace(ens.state, grid, params)
    elif trace.weights != params:
        trace = trace.with_weights(params, grid)
    n, np1 = est.y.shape[:2]
    dt = grid.dt
    start = int(min(np1 - 1, max(0, round((t_probe - grid.start) / dt))))
    idx = est.per_path_index
    cum = _cum(trace, n)
    mu = np.broadcast_to(trace.mu, (n, np1))
    nu = np.broadcast_to(trace.nu, (n, np1))
    a = np.broadcast_to(trace.a, (n, np1))
    beta, rho, rb = params.beta, params.rho, params.rho_bar
    xi_t, sup, zt = path_norm_terms(est.y, est.z, est.xi, idx, cum, dt, start)
    fint = np.zeros(n)
    mid = np.zeros(n)
    yf = np.zeros(n)
    aterm = np.zeros(n)
    for i in range(start, np1 - 1):
        r = np.flatnonzero(idx > i)
        if r.size == 0:
            break
        f = np.broadcast_to(np.asarray(g.f_bound(grid.time(i), ens.state[r, i]), dtype=float), (r.size,))
        ynorm2 = np.sum(est.y[r, i].reshape(r.size, -1) ** 2, axis=1)
        e1 = np.exp(cum[r, i])
        fint[r] += e1 * f * dt
        mid[r] += e1 ** 2 * ((2 * beta - 2) * mu[r, i] + (rho - rb) * nu[r, i] ** 2) * ynorm2 * dt
        yf[r] += e1 ** 2 * np.sqrt(ynorm2) * f * dt
        aterm[r] += e1 ** 2 * a[r, i] * ynorm2 * dt
    f2 = fint ** 2
    c02 = 2 * rb / (rb - 1)
    cstar = explicit_constant(rb)
    checks = [
        paired_check("z-by-y", zt, c02 * (sup + f2), slack),
        paired_check("explicit-constant", sup + zt + mid, cstar * (xi_t + f2), slack),
        paired_check("data-bound", sup + zt, cstar * (xi_t + f2), slack),
        paired_check("cross-term", sup + zt, cstar * (xi_t + yf), slack),
    ]
    lhs = float((sup + zt).mean())
    smallest = {
        "data-bound": lhs / float((xi_t + f2).mean()) if (xi_t + f2).mean() > 0 else 0.0,
        "cross-term": lhs / float((xi_t + yf).mean()) if (xi_t + yf).mean() > 0 else 0.0,
    }
    return AprioriReport(checks, {"z-by-y": c02, "explicit-constant": cstar, "data-bound": cstar,
                                  "cross-term": cstar},
                         smallest, float(aterm.mean()))


@dataclass
class DependenceReport:
    lhs: float
    lhs_se: float
    rhs_driver: tuple          # (evaluated at second solution, evaluated at first)
    ratio: tuple
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _driver_gap(g1, g2, est, ens, cum, alpha1=None, alpha2=None):
    """Per-path (sum_i e^{cum} |g1 - g2|(t_i, Y_i, Z_i) dt)^2 along ``est``."""
    grid = ens.grid
    n = est.y.shape[0]
    idx = est.per_path_index
    acc = np.zeros(n)
    for i in range(grid.n_steps):
        r = np.flatnonzero(idx > i)
        if r.size == 0:
            break
        t, x, y, z = grid.time(i), ens.state[r, i], est.y[r, i], est.z[r, i]
        a1 = None if alpha1 is None else alpha1[r, i]
        a2 = None if alpha2 is None else alpha2[r, i]
        gap = np.linalg.norm(g1.eval(t, x, y, z, a1) - g2.eval(t, x, y, z, a2), axis=1)
        acc[r] += np.exp(cum[r, i]) * gap * grid.dt
    return acc ** 2


def continuous_dependence(first, second, ens, trace: CoefficientTrace, slack: float = 4.0,
                          alphas=(None, None)) -> DependenceReport:
    """Compare two solved problems ``(est, g)`` on one ensemble.

    The checked bound is lhs <= C* rhs-driver with the explicit constant of
    the a priori estimate; both orderings of the driver term are checked.
    """
    (e1, g1), (e2, g2) = first, second
    if e1.y.shape[:2] != e2.y.shape[:2] or e1.y.shape[0] != ens.n_paths:
        raise ConfigurationError("the two solutions live on different grids or ensembles")
    if np.any(e1.per_path_index != e2.per_path_index):
        raise ConfigurationError("the two solutions use different terminal times")
    n = ens.n_paths
    cum = _cum(trace, n)
    dt = ens.grid.dt
    xi_t, sup, zt = path_norm_terms(e1.y - e2.y, e1.z - e2.z, e1.xi - e2.xi, e1.per_path_index, cum, dt)
    lhs_p = sup + zt
    at_second = xi_t + _driver_gap(g1, g2, e2, ens, cum, *alphas)
    at_first = xi_t + _driver_gap(g1, g2, e1, ens, cum, *alphas)
    cstar = explicit_constant(trace.weights.rho_bar)
    lhs, lse = _mean_se(lhs_p)
    rhs = (float(at_second.mean()), float(at_first.mean()))
    ratio = tuple(lhs / r if r > 0 else (0.0 if lhs == 0 else math.inf) for r in rhs)
    checks = [paired_check("dependence(Y',Z')", lhs_p, cstar * at_second, slack),
              paired_check("dependence(Y,Z)", lhs_p, cstar * at_first, slack)]
    return DependenceReport(lhs, lse, rhs, ratio, checks)


@dataclass
class StabilityTable:
    n: list
    premise: list
    premise_se: list
    distance: list
    distance_se: list
    floor: float = 0.0

    @staticmethod
    def _trend_ok(v, se, floor):
        ok = all(v[j + 1] <= v[j] + math.hypot(se[j], se[j + 1]) for j in range(len(v) - 1))
        return ok and v[-1] <= max(4 * se[-1], floor)

    @property
    def passed(self) -> bool:
        return self._trend_ok(self.premise, self.premise_se, self.floor) and \
            self._trend_ok(self.distance, self.distance_se, self.floor)

    def rows(self):
        return list(zip(self.n, self.premise, self.premise_se, self.distance, self.distance_se))


def stability_sequence(limit, sequence, ens, trace: CoefficientTrace, alpha=None,
                       floor: float = 1e-20) -> StabilityTable:
    """Premise and solution distance for approximating problems.

    ``limit`` is ``(est, g)``; ``sequence`` is a list of ``(n, est_n, g_n)``.
    The premise is E[e^{2 int a}|xi_n - xi|^2] + E[(int e^{int a}|g_n - g|(Y, Z) dt)^2]
    evaluated along the limit solution.
    """
    est, g = limit
    n_paths = ens.n_paths
    cum = _cum(trace, n_paths)
    dt = ens.grid.dt
    tab = StabilityTable([], [], [], [], [], floor)
    idx = est.per_path_index
    rows = np.arange(n_paths)
    for n, est_n, g_n in sequence:
        xi_t = np.exp(2 * cum[rows, idx]) * np.sum((est_n.xi - est.xi) ** 2, axis=1)
        prem = xi_t + _driver_gap(g_n, g, est, ens, cum, alpha, alpha)
        _, sup, zt = path_norm_terms(est_n.y - est.y, est_n.z - est.z, est_n.xi - est.xi, idx, cum, dt)
        pm, ps = _mean_se(prem)
        dm, ds = _mean_se(sup + zt)
        tab.n.append(n)
        tab.premise.append(pm)
        tab.premise_se.append(ps)
        tab.distance.append(dm)
        tab.distance_se.append(ds)
    return tab


def loglog_slope(x, y) -> float:
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
