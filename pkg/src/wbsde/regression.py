"""Least-squares projections onto state-dependent bases."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, RegressionError


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial (total degree ``degree``) or piecewise-constant (``bins``) basis.

    Polynomials act on standardised coordinates; coordinates with no spread
    across the sample (a shared root state, for instance) are dropped so the
    design never carries duplicate constant columns. Bins are equal-count
    cells of the first active coordinate.
    """

    family: str = "polynomial"
    degree: int = 3
    bins: int = 16

    def __post_init__(self):
        if self.family not in ("polynomial", "bins"):
            raise ConfigurationError(f"unknown basis family {self.family!r}")
        if self.family == "polynomial" and self.degree < 0:
            raise ConfigurationError("polynomial degree must be nonnegative")
        if self.family == "bins" and self.bins < 1:
            raise ConfigurationError("need at least one bin")

    def prepare(self, x: np.ndarray) -> "FittedBasis":
        x = np.asarray(x, dtype=float).reshape(x.shape[0], -1)
        center = x.mean(axis=0)
        scale = x.std(axis=0)
        active = np.flatnonzero(scale > 1e-12 * np.maximum(1.0, np.abs(center)))
        if self.family == "polynomial":
            terms = [()]
            for deg in range(1, self.degree + 1):
                terms += list(combinations_with_replacement(active.tolist(), deg))
            return FittedBasis(self, center, np.where(scale > 0, scale, 1.0), active, tuple(terms), None)
        if active.size == 0:
            return FittedBasis(self, center, np.ones_like(scale), active, ((),), None)
        col = x[:, active[0]]
        edges = np.unique(np.quantile(col, np.linspace(0, 1, self.bins + 1)[1:-1]))
        return FittedBasis(self, center, np.ones_like(scale), active, (), edges)


@dataclass(frozen=True)
class FittedBasis:
    basis: RegressionBasis
    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    terms: tuple
    edges: Optional[np.ndarray]

    @property
    def size(self) -> int:
        return len(self.terms) if self.edges is None else self.edges.size + 1

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(x.shape[0], -1)
        if self.edges is not None:
            cell = np.searchsorted(self.edges, x[:, self.active[0]], side="right")
            out = np.zeros((x.shape[0], self.size))
            out[np.arange(x.shape[0]), cell] = 1.0
            return out
        u = (x - self.center) / self.scale
        out = np.empty((x.shape[0], len(self.terms)))
        for j, term in enumerate(self.terms):
            col = np.ones(x.shape[0])
            for dim in term:
                col = col * u[:, dim]
            out[:, j] = col
        return out


@dataclass
class Projection:
    fitted: FittedBasis
    coef: np.ndarray
    condition: float
    ridge: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.fitted.design(x) @ self.coef


def project(basis: RegressionBasis, x: np.ndarray, targets: np.ndarray, ridge: float = 0.0,
            cond_threshold: float = 1e10, node: Optional[int] = None):
    """Regress ``targets`` (n, m) on ``basis(x)``; returns (fitted values, Projection).

    The normal equations are solved directly; when the Gram matrix has
    condition number above ``cond_threshold`` a ridge of relative size 1e-10
    (or the user ridge, whichever is larger) is added.
    """
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    n = x.shape[0]
    fb = basis.prepare(x)
    # too few samples for the full basis: fall back to the sample mean
    if n < 2 * fb.size and fb.size > 1:
        fb = FittedBasis(basis, fb.center, fb.scale, np.array([], dtype=int), ((),), None)
    phi = fb.design(x)
    gram = phi.T @ phi / n
    rhs = phi.T @ targets / n
    cond = float(np.linalg.cond(gram)) if gram.shape[0] > 1 else 1.0
    lam = float(ridge)
    if not np.isfinite(cond) or cond > cond_threshold:
        lam = max(lam, 1e-10 * float(np.trace(gram)) / gram.shape[0])
    try:
        coef = scipy.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RegressionError(f"Gram matrix singular ({exc})", node) from exc
    if not np.all(np.isfinite(coef)):
        raise RegressionError("non-finite regression coefficients", node)
    return phi @ coef, Projection(fb, coef, cond, lam)
