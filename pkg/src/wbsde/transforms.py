"""Approximation operators on generators: mollification, level truncation, radial clamp."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import integrate

from .core import GeneratorSpec
from .errors import ConfigurationError


def clamp_q(x, r):
    """Radial clamp ``x * r / max(|x|, r)`` over the last axis."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ConfigurationError("clamp radius must be nonnegative")
    x = np.asarray(x, dtype=float)
    # scaled norm so that tiny vectors do not underflow to zero length
    big = np.max(np.abs(x), axis=-1, keepdims=True)
    safe = np.where(big > 0, big, 1.0)
    norm = big * np.sqrt(np.sum((x / safe) ** 2, axis=-1, keepdims=True))
    rr = r[..., None] if r.ndim else r
    denom = np.maximum(norm, rr)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, x * (rr / np.where(denom > 0, denom, 1.0)), 0.0)
    return out


def truncated_terminal(xi_values: np.ndarray, alpha_tau: np.ndarray, n: float) -> np.ndarray:
    """Terminal values clamped path by path to the ball of radius ``n * alpha_tau**2``."""
    return clamp_q(xi_values, n * np.asarray(alpha_tau, dtype=float) ** 2)


def truncation_theta(u, r, alpha):
    """Piecewise-linear cutoff: alpha on [0, r*alpha], then slope -1 down to zero at (r+1)*alpha."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ConfigurationError("truncation level u must be nonnegative")
    alpha = np.asarray(alpha, dtype=float)
    return np.clip((r + 1.0) * alpha - u, 0.0, alpha)


def exp_gap(lam, x):
    """Both sides of ``|e^{lam x} - 1| <= lam (e^{|x|} + |x| - 1)`` for lam in [0, 1]."""
    lam = np.asarray(lam, dtype=float)
    if np.any((lam < 0) | (lam > 1)):
        raise ConfigurationError("lambda must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    lhs = np.abs(np.expm1(lam * x))
    rhs = lam * (np.expm1(np.abs(x)) + np.abs(x))
    return lhs, rhs


def _bump(r2):
    inside = r2 < 1.0
    out = np.zeros_like(r2)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


@lru_cache(maxsize=None)
def bump_mass(k: int) -> float:
    """Integral of exp(-1/(1-|u|^2)) over the unit ball in R^k (radial quadrature)."""
    surface = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}
    if k not in surface:
        raise ConfigurationError("mollification supports k <= 3")
    val, _ = integrate.quad(lambda s: s ** (k - 1) * np.exp(-1.0 / (1.0 - s * s)) if s < 1 else 0.0,
                            0.0, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200)
    return surface[k] * val


@lru_cache(maxsize=None)
def ball_rule(k: int, n_quad: int):
    """Tensor Gauss-Legendre nodes inside the unit ball with bump weights summing to one.

    Returns (nodes, weights, raw_mass_error) where the last entry is the
    relative error of the unnormalised rule against the radial reference mass.
    """
    g, w = np.polynomial.legendre.leggauss(n_quad)
    grids = np.meshgrid(*([g] * k), indexing="ij")
    nodes = np.stack([m.ravel() for m in grids], axis=1)
    wt = np.ones(nodes.shape[0])
    for m in np.meshgrid(*([w] * k), indexing="ij"):
        wt = wt * m.ravel()
    keep = np.sum(nodes ** 2, axis=1) < 1.0
    nodes, wt = nodes[keep], wt[keep] * _bump(np.sum(nodes[keep] ** 2, axis=1))
    total = wt.sum()
    if not np.isfinite(total) or total <= 0:
        raise ConfigurationError("degenerate mollifier quadrature")
    raw_err = total / bump_mass(k) - 1.0
    weights = wt / total
    if abs(weights.sum() - 1.0) > 1e-8:
        raise ConfigurationError("mollifier weights do not sum to one")
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights, float(raw_err)


def mollify_generator(g: GeneratorSpec, n: int, n_quad: int = 32) -> GeneratorSpec:
    """Convolution in y with the bump kernel scaled to radius 1/n."""
    if n < 1:
        raise ConfigurationError("mollification index must be >= 1")
    nodes, weights, _ = ball_rule(g.k, n_quad)
    shifts = nodes / n

    def fn(t, x, y, z, *alpha):
        acc = np.zeros(np.shape(y))
        for s, w in zip(shifts, weights):
            acc += w * g.eval(t, x, y - s, z, *alpha)
        return acc

    return g.replace(fn=fn, name=f"{g.name}*phi_{n}")


def _envelope_points(k: int, count: int = 64) -> np.ndarray:
    """Deterministic points in the closed unit ball (segment for k = 1)."""
    if k == 1:
        return np.linspace(-1.0, 1.0, count)[:, None]
    i = np.arange(count) + 0.5
    radius = np.sqrt(i / count) if k == 2 else np.cbrt(i / count)
    if k == 2:
        ang = np.pi * (1 + 5 ** 0.5) * i
        pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        phi = np.arccos(1 - 2 * i / count)
        ang = np.pi * (1 + 5 ** 0.5) * i
        pts = np.stack([np.cos(ang) * np.sin(phi), np.sin(ang) * np.sin(phi), np.cos(phi)], axis=1)
        pts = np.concatenate([pts, np.zeros((count, k - 3))], axis=1) if k > 3 else pts
    out = radius[:, None] * pts
    out[-1] = pts[-1]  # make sure the sphere itself is sampled
    return out


def estimate_envelope(g: GeneratorSpec, t, x, z, radius, alpha=None, count: int = 64):
    """max over sampled |y| <= radius of |g(t,x,y,z) - g(t,x,0,z)|, per path.

    A lower estimate of the supremum: only ``count`` deterministic points
    are evaluated.
    """
    if count < 1:
        raise ConfigurationError("envelope sampling budget is zero and no envelope was declared")
    n = x.shape[0]
    base = g.eval(t, x, np.zeros((n, g.k)), z, alpha)
    best = np.zeros(n)
    for p in _envelope_points(g.k, count):
        y = radius[:, None] * p[None, :]
        best = np.maximum(best, np.linalg.norm(g.eval(t, x, y, z, alpha) - base, axis=1))
    return best


def truncated_generator(g: GeneratorSpec, r: float, n: float, envelope_samples: int = 64) -> GeneratorSpec:
    """Level-truncated driver built from theta, the envelope and the cap ``n e^{-t} alpha_t``.

    The result uses the alpha process of ``g`` (which must declare one).
    The truncation acts in y with z held fixed.
    """
    if g.alpha is None:
        raise ConfigurationError(f"{g.name} declares no alpha rule")
    if g.growth_envelope is None and envelope_samples <= 0:
        raise ConfigurationError("envelope rule missing and sampling budget zero")
    if r <= 0 or n <= 0:
        raise ConfigurationError("r and n must be positive")
    base_alpha = g.uses_alpha

    def inner(t, x, y, z, alpha):
        return g.fn(t, x, y, z, alpha) if base_alpha else g.fn(t, x, y, z)

    def fn(t, x, y, z, alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (y.shape[0],))
        zero = np.zeros_like(y)
        g0 = inner(t, x, zero, z, alpha)
        rad = (r + 1.0) * alpha
        if g.growth_envelope is not None:
            psi = np.broadcast_to(np.asarray(g.growth_envelope(t, rad), dtype=float), alpha.shape)
        else:
            tmp = GeneratorSpec(inner, g.coeff, g.k, g.d, uses_alpha=True)
            psi = estimate_envelope(tmp, t, x, z, rad, alpha, envelope_samples)
        cap = n * np.exp(-t)
        factor = cap / np.maximum(psi, cap * alpha)
        theta = truncation_theta(np.linalg.norm(y, axis=1), r, alpha)
        return (theta * factor)[:, None] * (inner(t, x, y, z, alpha) - g0) + g0

    return g.replace(fn=fn, uses_alpha=True, name=f"{g.name}^trunc(r={r:g},n={n:g})")


def clamped_data_generator(g: GeneratorSpec, n: float) -> GeneratorSpec:
    """``g - g(t,0) + q_{n e^{-t} alpha_t^2}(g(t,0))``: the driver's value at zero is clamped."""
    if g.alpha is None:
        raise ConfigurationError(f"{g.name} declares no alpha rule")
    base_alpha = g.uses_alpha

    def inner(t, x, y, z, alpha):
        return g.fn(t, x, y, z, alpha) if base_alpha else g.fn(t, x, y, z)

    def fn(t, x, y, z, alpha):
        alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (y.shape[0],))
        g0 = inner(t, x, np.zeros_like(y), np.zeros_like(z), alpha)
        return inner(t, x, y, z, alpha) - g0 + clamp_q(g0, n * np.exp(-t) * alpha ** 2)

    return g.replace(fn=fn, uses_alpha=True, name=f"{g.name}^clamp(n={n:g})")
