"""Regression-based backward sweep and the outer Picard iteration over the z-argument."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import (CoefficientTrace, GeneratorSpec, SolutionEstimate, TerminalCondition,
                   TerminalTime, WeightParams, describe)
from .errors import ConfigurationError, DivergenceError, SolverError
from .paths import PathEnsemble
from .regression import RegressionBasis, project


@dataclass(frozen=True)
class SolverSettings:
    basis: RegressionBasis = field(default_factory=RegressionBasis)
    picard_max: int = 20
    picard_tol: float = 1e-8
    implicit_y: bool = False
    inner_damping: float = 1.0
    ridge: float = 0.0
    weights: WeightParams = field(default_factory=WeightParams)
    inner_max: int = 50
    cond_threshold: float = 1e10
    pretruncate: Optional[tuple] = None   # (r, n) for truncated_generator before solving

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ConfigurationError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ConfigurationError("picard_max must be at least 1")
        if not 0 < self.inner_damping <= 1:
            raise ConfigurationError("inner_damping must lie in (0, 1]")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be nonnegative")


def _xi_values(xi, ens, tau) -> np.ndarray:
    if isinstance(xi, TerminalCondition):
        return xi(ens, tau)
    out = np.asarray(xi, dtype=float)
    return out[:, None] if out.ndim == 1 else out


def _scalar_implicit_step(g, t, x, base, v, alpha, dt, max_iter):
    """k = 1 version: bracket the root, then safeguarded Newton.

    Newton alone crawls through exponential drivers (one unit of the
    exponent per step), so any step that fails to halve the residual is
    replaced by bisection of the current bracket.
    """
    n = base.shape[0]
    b = base[:, 0]

    def F(y, rows):
        ar = None if alpha is None else alpha[rows]
        return y - b[rows] - dt * g.eval(t, x[rows], y[:, None], v[rows], ar)[:, 0]

    allr = np.arange(n)
    f0 = F(b, allr)
    tiny = 1e-12 * (1.0 + np.abs(b))
    done = np.abs(f0) <= tiny
    y = b.copy()
    lo, hi = b.copy(), b.copy()
    flo, fhi = f0.copy(), f0.copy()
    # expand a bracket around the root; F(y) = 0 changes sign somewhere
    s = np.maximum(np.minimum(np.abs(f0), 0.1 * (1.0 + np.abs(b))), tiny)
    need = ~done
    for _ in range(200):
        if not need.any():
            break
        r = np.flatnonzero(need)
        up = f0[r] < 0
        trial = np.where(up, b[r] + s[r], b[r] - s[r])
        ft = F(trial, r)
        ok = np.where(up, ft >= 0, ft <= 0) & np.isfinite(ft)
        hi[r] = np.where(up, trial, hi[r])
        fhi[r] = np.where(up, ft, fhi[r])
        lo[r] = np.where(up, lo[r], trial)
        flo[r] = np.where(up, flo[r], ft)
        # keep the inner end of the bracket tight
        lo[r] = np.where(up & ~ok, trial, lo[r])
        flo[r] = np.where(up & ~ok, ft, flo[r])
        hi[r] = np.where(~up & ~ok, trial, hi[r])
        fhi[r] = np.where(~up & ~ok, ft, fhi[r])
        need[r[ok]] = False
        s[r] *= 2.0
    if need.any():
        raise SolverError(f"implicit step could not bracket a root at t={t:g}")
    fy = f0.copy()
    y = np.where(done, b, 0.5 * (lo + hi))
    act = np.flatnonzero(~done)
    if act.size:
        fy[act] = F(y[act], act)
    for _ in range(max_iter):
        scale = 1e-12 * (1.0 + np.abs(y))
        live = ~done & (np.abs(fy) > scale) & (hi - lo > 4e-16 * (1.0 + np.abs(y)))
        done |= ~live
        if not live.any():
            break
        r = np.flatnonzero(live)
        # shrink the bracket with the current point
        pos = fy[r] > 0
        hi[r] = np.where(pos, y[r], hi[r])
        lo[r] = np.where(pos, lo[r], y[r])
        h = 1e-7 * (1.0 + np.abs(y[r]))
        dF = (F(y[r] + h, r) - fy[r]) / h
        with np.errstate(divide="ignore", invalid="ignore"):
            cand = y[r] - fy[r] / dF
        inside = np.isfinite(cand) & (cand > lo[r]) & (cand < hi[r])
        cand = np.where(inside, cand, 0.5 * (lo[r] + hi[r]))
        fc = F(cand, r)
        slow = ~(np.abs(fc) <= 0.5 * np.abs(fy[r]))
        if slow.any():
            rs = r[slow]
            # bracket update with the rejected candidate before bisecting
            cs, fcs = cand[slow], fc[slow]
            hi[rs] = np.where(fcs > 0, np.minimum(hi[rs], cs), hi[rs])
            lo[rs] = np.where(fcs <= 0, np.maximum(lo[rs], cs), lo[rs])
            mid = 0.5 * (lo[rs] + hi[rs])
            cand[slow] = mid
            fc[slow] = F(mid, rs)
        y[r], fy[r] = cand, fc
    scale = 1e-9 * (1.0 + np.abs(y))
    bad = (np.abs(fy) > scale) & (hi - lo > 1e-12 * (1.0 + np.abs(y)))
    if bad.any():
        raise SolverError(f"implicit step did not converge at t={t:g} within {max_iter} iterations")
    return y[:, None]


def _implicit_step(g, t, x, base, v, alpha, dt, damping, max_iter):
    """Solve ``y = base + dt * g(t, x, y, v)`` per path.

    Scalar problems use a bracketed Newton iteration. For k > 1 this is
    damped Newton with a forward-difference Jacobian and backtracking;
    monotone drivers make ``I - dt * dg/dy`` well conditioned for small dt.
    """
    n, k = base.shape
    if k == 1 and damping == 1.0:
        return _scalar_implicit_step(g, t, x, base, v, alpha, dt, max_iter)
    y = base.copy()
    eye = np.eye(k)
    gy = g.eval(t, x, y, v, alpha)
    res = y - base - dt * gy
    for _ in range(max_iter):
        scale = 1.0 + np.abs(y).max(axis=1) + dt * np.abs(gy).max(axis=1)
        err = np.abs(res).max(axis=1)
        todo = err > 1e-12 * scale
        if not todo.any():
            return y
        rows = np.flatnonzero(todo)
        yr, xr, vr = y[rows], x[rows], v[rows]
        ar = None if alpha is None else alpha[rows]
        jac = np.empty((rows.size, k, k))
        h = 1e-7 * (1.0 + np.abs(yr))
        for j in range(k):
            yp = yr.copy()
            yp[:, j] += h[:, j]
            jac[:, :, j] = (g.eval(t, xr, yp, vr, ar) - gy[rows]) / h[:, [j]]
        mat = eye[None] - dt * jac
        step = np.linalg.solve(mat, res[rows][:, :, None])[:, :, 0]
        lam = np.full(rows.size, damping)
        cur = np.abs(res[rows]).max(axis=1)
        for _ in range(30):
            trial = yr - lam[:, None] * step
            gt = g.eval(t, xr, trial, vr, ar)
            rt = trial - base[rows] - dt * gt
            worse = ~(np.abs(rt).max(axis=1) <= cur) & (lam > 1e-6)
            if not worse.any():
                break
            lam[worse] *= 0.5
        y[rows], gy[rows], res[rows] = trial, gt, rt
    scale = 1.0 + np.abs(y).max(axis=1) + dt * np.abs(gy).max(axis=1)
    if np.any(np.abs(res).max(axis=1) > 1e-9 * scale):
        raise SolverError(f"implicit step did not converge at t={t:g} within {max_iter} iterations")
    return y


def backward_sweep(g: GeneratorSpec, xi, ens: PathEnsemble, tau: TerminalTime,
                   V: Optional[np.ndarray], settings: SolverSettings,
                   alpha: Optional[np.ndarray] = None) -> SolutionEstimate:
    """One backward pass with the z-argument of the driver frozen at ``V``.

    ``V`` is (n, N+1, k, d) or None for the zero process.
    """
    grid = ens.grid
    n, N, d = ens.n_paths, grid.n_steps, ens.d
    if tau.n_paths != n or tau.n_steps != N:
        raise ConfigurationError("terminal time does not match the ensemble")
    if V is not None and V.shape[:2] != (n, N + 1):
        raise ConfigurationError("frozen z-paths do not match the ensemble")
    xi_v = _xi_values(xi, ens, tau)
    k = xi_v.shape[1]
    if g.uses_alpha and alpha is None:
        raise ConfigurationError(f"{g.name} needs an alpha trace")
    idx = tau.per_path_index
    dt = grid.dt
    y = np.empty((n, N + 1, k))
    y[:] = xi_v[:, None, :]
    z = np.zeros((n, N + 1, k, d))
    coeffs: list = [None] * (N + 1)
    zero_v = np.zeros((n, k, d))
    states = ens.state
    for i in range(N - 1, -1, -1):
        rows = np.flatnonzero(idx > i)
        if rows.size == 0:
            continue
        x = states[rows, i]
        nxt = y[rows, i + 1]
        db = ens.dB[rows, i]
        targets = np.concatenate([nxt, (nxt[:, :, None] * db[:, None, :]).reshape(rows.size, k * d) / dt], axis=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted, proj = project(settings.basis, x, targets, settings.ridge, settings.cond_threshold, node=i)
        ytil = fitted[:, :k]
        z[rows, i] = fitted[:, k:].reshape(rows.size, k, d)
        v = zero_v[: rows.size] if V is None else V[rows, i]
        al = None if alpha is None else alpha[rows, i]
        t = grid.time(i)
        if settings.implicit_y:
            y[rows, i] = _implicit_step(g, t, x, ytil, v, al, dt, settings.inner_damping, settings.inner_max)
        else:
            y[rows, i] = ytil + dt * g.eval(t, x, ytil, v, al)
        coeffs[i] = proj
    if not np.all(np.isfinite(y)):
        raise SolverError(f"non-finite y in backward sweep of {g.name}")
    meta = {"settings": describe(settings), "generator": g.name, "seed": ens.seed,
            "grid": describe(grid), "n_paths": n}
    return SolutionEstimate(y, z, xi_v, idx, coeffs, meta)


def weighted_z_distance(za, zb, cum_a, idx, dt):
    """Per-path terms of the discrete weighted M^2 distance, summed over i < idx.

    Accumulated node by node so long grids need no full-size temporaries.
    """
    n, np1 = za.shape[:2]
    cum_a = np.broadcast_to(cum_a, (n, np1)) if cum_a.shape[0] == 1 else cum_a
    out = np.zeros(n)
    for i in range(np1 - 1):
        rows = np.flatnonzero(idx > i)
        if rows.size == 0:
            break
        diff = za[rows, i] if zb is None else za[rows, i] - zb[rows, i]
        sq = (diff ** 2).reshape(rows.size, -1).sum(axis=1)
        out[rows] += np.exp(2.0 * cum_a[rows, i]) * sq * dt
    return out


@dataclass
class PicardResult:
    estimate: SolutionEstimate
    distances: list
    path_terms: list
    trace: CoefficientTrace

    def __iter__(self):
        # allows ``est, dists = picard_solve(...)``
        return iter((self.estimate, self.distances))


def picard_solve(g: GeneratorSpec, xi, ens: PathEnsemble, tau: TerminalTime,
                 settings: SolverSettings, trace: Optional[CoefficientTrace] = None) -> PicardResult:
    """Iterate ``V^{m+1} = z(backward_sweep(V^m))`` from ``V^0 = 0``.

    Distances are measured in the weighted M^2 norm built from the
    generator's declared coefficients. A driver flagged ``z_free`` makes the
    map constant, so the second distance is exactly zero and no second sweep
    is run.
    """
    if settings.pretruncate is not None:
        from .transforms import truncated_generator

        g = truncated_generator(g, *settings.pretruncate)
    if trace is None:
        trace = g.coefficient_trace(ens.state, ens.grid, settings.weights)
    alpha = g.alpha_trace(ens.state, ens.grid, trace)
    xi_v = _xi_values(xi, ens, tau)
    dt = ens.grid.dt
    V = None
    dists, terms = [], []
    est = None
    for m in range(settings.picard_max):
        est = backward_sweep(g, xi_v, ens, tau, V, settings, alpha)
        part = weighted_z_distance(est.z, V, trace.cum_a, tau.per_path_index, dt)
        terms.append(part)
        dists.append(float(part.mean()))
        V = est.z
        if not np.isfinite(dists[-1]):
            raise DivergenceError(f"{g.name}: non-finite Picard distance", dists)
        if dists[-1] < settings.picard_tol:
            break
        if g.z_free:
            terms.append(np.zeros(ens.n_paths))
            dists.append(0.0)
            break
        if len(dists) >= 4 and dists[-1] > dists[-2] > dists[-3] > dists[-4]:
            raise DivergenceError(
                f"{g.name}: Picard distances increased three times in a row; "
                f"the declared rho={settings.weights.rho} > 1 premise (or the declared nu) is "
                "likely not satisfied", dists)
    est.meta["picard_distances"] = list(dists)
    return PicardResult(est, dists, terms, trace)


def contraction_ratios(result: PicardResult, n_boot: int = 200, seed: int = 0):
    """Ratios dist_{m+1}/dist_m with bootstrap standard errors over paths."""
    terms = np.array(result.path_terms)
    if terms.shape[0] < 2:
        return np.array([]), np.array([])
    means = terms.mean(axis=1)
    ratios = means[1:] / means[:-1]
    rng = np.random.default_rng(seed)
    n = terms.shape[1]
    boot = np.empty((n_boot, ratios.size))
    for b in range(n_boot):
        pick = rng.integers(0, n, n)
        mb = terms[:, pick].mean(axis=1)
        boot[b] = mb[1:] / mb[:-1]
    return ratios, boot.std(axis=0, ddof=1)


@dataclass
class ResidualReport:
    mean: np.ndarray
    std_err: np.ndarray
    cond_mean_rms: np.ndarray
    cond_std_err: np.ndarray
    allowance: np.ndarray
    flagged: np.ndarray

    @property
    def passed(self) -> bool:
        return not self.flagged.any()


def residual_check(est: SolutionEstimate, g: GeneratorSpec, xi, ens: PathEnsemble, tau: TerminalTime,
                   basis: Optional[RegressionBasis] = None, alpha: Optional[np.ndarray] = None,
                   allowance_const: float = 1.0) -> ResidualReport:
    """Per-node residuals ``R_i = y_i - y_{i+1} - dt g(t_i, X_i, y_i, z_i) + z_i dB_i``.

    Node i is flagged when either the ensemble mean or the root mean square
    of the fitted conditional mean exceeds 4 of its standard errors plus
    ``allowance_const * dt`` times the typical size of y at that node.
    """
    basis = basis or RegressionBasis()
    grid = ens.grid
    N, dt = grid.n_steps, grid.dt
    idx = tau.per_path_index
    k = est.y.shape[2]
    mean = np.zeros((N, k))
    se = np.zeros((N, k))
    cmax = np.zeros((N, k))
    cse = np.zeros((N, k))
    allow = np.zeros(N)
    for i in range(N):
        rows = np.flatnonzero(idx > i)
        if rows.size < 2:
            continue
        yi, zi = est.y[rows, i], est.z[rows, i]
        al = None if alpha is None else alpha[rows, i]
        r = yi - est.y[rows, i + 1] - dt * g.eval(grid.time(i), ens.state[rows, i], yi, zi, al) \
            + np.einsum("nkd,nd->nk", zi, ens.dB[rows, i])
        mean[i] = r.mean(axis=0)
        se[i] = r.std(axis=0, ddof=1) / np.sqrt(rows.size)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted, proj = project(basis, ens.state[rows, i], r)
        m = proj.fitted.size
        # pure noise projected on m basis functions has rms about sqrt(m) standard errors
        cse[i] = se[i] * np.sqrt(m)
        cmax[i] = np.sqrt(np.mean(fitted ** 2, axis=0)) if m > 1 else np.abs(mean[i])
        allow[i] = allowance_const * dt * max(1.0, float(np.abs(yi).mean()))
    flagged = np.any((np.abs(mean) > 4 * se + allow[:, None]) | (cmax > 4 * cse + allow[:, None]), axis=1)
    return ResidualReport(mean, se, cmax, cse, allow, flagged)


@dataclass
class AssumptionReport:
    monotone_violation: float
    lipschitz_violation: float
    monotone_pass: bool
    lipschitz_pass: bool
    max_jump: float
    yz_lipschitz_violation: Optional[float] = None
    yz_lipschitz_pass: Optional[bool] = None
    driver_bound_violation: Optional[float] = None
    driver_bound_pass: Optional[bool] = None
    n_samples: int = 0
    n_skipped: int = 0      # samples where the driver overflowed and nothing can be compared

    @property
    def passed(self) -> bool:
        flags = [self.monotone_pass, self.lipschitz_pass] + [f for f in (self.yz_lipschitz_pass, self.driver_bound_pass) if f is not None]
        return all(flags)


def _norm(v):
    return np.linalg.norm(v.reshape(v.shape[0], -1), axis=1)


def validate_assumptions(g: GeneratorSpec, sample_budget: int = 20000, seed: int = 0, l: int = 1,
                         y_range: float = 3.0, z_range: float = 3.0, x_scale: float = 1.5,
                         t_max: float = 1.0, lip_y: Optional[Callable] = None,
                         driver_bound: bool = False, tol: float = 1e-9) -> AssumptionReport:
    """Sample the declared monotonicity, Lipschitz and growth conditions.

    Half the pairs are drawn far apart and half close together (including
    pairs straddling the origin), since one-sided bounds tend to bind at
    small separations. Violations are divided by a per-sample magnitude
    ``max(1, |terms|)`` before comparing with ``tol``. Samples where the
    driver is not finite in floating point are skipped and counted; if more
    than half are skipped the report fails.
    """
    rng = np.random.default_rng(seed)
    n, k, d = sample_budget, g.k, g.d
    t = rng.uniform(0, t_max)
    x = rng.normal(0, x_scale, (n, l))
    half = n // 2

    def pairs(rangev, shape):
        a = rng.uniform(-rangev, rangev, (n,) + shape)
        b = rng.uniform(-rangev, rangev, (n,) + shape)
        eps = 10.0 ** rng.uniform(-6, 0, (n - half,) + (1,) * len(shape))
        b[half:] = a[half:] + eps * rng.normal(size=(n - half,) + shape)
        quarter = half + (n - half) // 2
        a[quarter:] = eps[quarter - half:] * rng.normal(size=(n - quarter,) + shape)
        b[quarter:] = 0.0
        return a, b

    y1, y2 = pairs(y_range, (k,))
    z1, z2 = pairs(z_range, (k, d))
    z = rng.uniform(-z_range, z_range, (n, k, d))
    y = rng.uniform(-y_range, y_range, (n, k))
    mu, nu = g.coeff(t, x)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (n,))
    al = np.ones(n) if g.uses_alpha else None

    with np.errstate(over="ignore", invalid="ignore"):
        ga, gb = g.eval(t, x, y1, z, al), g.eval(t, x, y2, z, al)
        dy = y1 - y2
        inner = np.sum(dy * (ga - gb), axis=1)
        viol4 = inner - mu * np.sum(dy ** 2, axis=1)
        scale4 = np.maximum(1.0, _norm(dy) * (_norm(ga) + _norm(gb)) + mu * np.sum(dy ** 2, axis=1))
        ok4 = np.isfinite(ga).all(axis=1) & np.isfinite(gb).all(axis=1)
        r4 = np.where(ok4, np.nan_to_num(viol4 / scale4, nan=np.inf), -np.inf)

        gc, gd = g.eval(t, x, y, z1, al), g.eval(t, x, y, z2, al)
        dg = _norm(gc - gd)
        dz = _norm(z1 - z2)
        viol5 = dg - nu * dz
        scale5 = np.maximum(1.0, _norm(gc) + _norm(gd))
        ok5 = np.isfinite(gc).all(axis=1) & np.isfinite(gd).all(axis=1)
        r5 = np.where(ok5, np.nan_to_num(viol5 / scale5, nan=np.inf), -np.inf)

        h = 1e-8
        jumps = _norm(g.eval(t, x, y + h, z, al) - g.eval(t, x, y, z, al))
        jump = float(np.max(jumps[np.isfinite(jumps)], initial=0.0))

    skipped = int(n - min(ok4.sum(), ok5.sum()))
    enough = skipped <= n // 2
    rep = AssumptionReport(float(r4.max()), float(r5.max()), bool(r4.max() <= tol and enough),
                           bool(r5.max() <= tol and enough), jump, n_samples=n, n_skipped=skipped)
    if lip_y is not None:
        ly = np.broadcast_to(np.asarray(lip_y(t, x), dtype=float), (n,))
        gsa, gsb = g.eval(t, x, y1, z, al), g.eval(t, x, y2, z, al)
        rs = (_norm(gsa - gsb) - ly * _norm(dy)) / np.maximum(1.0, _norm(gsa) + _norm(gsb))
        rep.yz_lipschitz_violation, rep.yz_lipschitz_pass = float(rs.max()), bool(rs.max() <= tol)
    if driver_bound:
        if g.f_bound is None:
            raise ConfigurationError(f"{g.name} declares no f_bound")
        f = np.broadcast_to(np.asarray(g.f_bound(t, x), dtype=float), (n,))
        gv = g.eval(t, x, y, z, al)
        ny = _norm(y)
        yhat = np.where(ny[:, None] > 0, y / np.where(ny > 0, ny, 1.0)[:, None], 0.0)
        va = np.sum(yhat * gv, axis=1) - (f + mu * ny + nu * _norm(z))
        ra = va / np.maximum(1.0, _norm(gv) + f)
        rep.driver_bound_violation, rep.driver_bound_pass = float(ra.max()), bool(ra.max() <= tol)
    return rep
