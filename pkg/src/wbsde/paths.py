"""Seeded Brownian increments, Euler-Maruyama forward paths and exit detection."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .core import TerminalTime, TimeGrid
from .errors import ConfigurationError, SimulationError

_MASK64 = (1 << 64) - 1
_INV53 = 2.0 ** -53


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministic 64-bit child seed for a labelled sub-experiment."""
    words = [int(seed) & _MASK64] + [int(v) & _MASK64 for v in labels]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def path_normals(seed: int, path_id: int, count: int) -> np.ndarray:
    """Standard normals for one path from a Philox counter stream keyed by (seed, path).

    Uniforms use the top 53 bits of each counter output, shifted off zero,
    and are mapped through the inverse normal CDF, so the values depend only
    on (seed, path_id, position) and not on how paths are partitioned.
    """
    key = np.array([int(seed) & _MASK64, int(path_id) & _MASK64], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
    return ndtri(u)


def _chunks(n: int, workers: int):
    workers = max(1, min(int(workers), n))
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [(edges[i], edges[i + 1]) for i in range(workers) if edges[i + 1] > edges[i]]


@dataclass(frozen=True)
class PathEnsemble:
    grid: TimeGrid
    dB: np.ndarray                 # (n, N, d)
    state: Optional[np.ndarray]    # (n, N+1, l)
    seed: int
    substream_ids: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def d(self) -> int:
        return self.dB.shape[2]

    def brownian(self, x0=0.0) -> np.ndarray:
        n, N, d = self.dB.shape
        out = np.empty((n, N + 1, d))
        out[:, 0] = x0
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        out[:, 1:] += out[:, :1]
        return out

    def with_state(self, state: np.ndarray) -> "PathEnsemble":
        state = np.asarray(state, dtype=float)
        state.setflags(write=False)
        return replace(self, state=state)

    def subset(self, rows) -> "PathEnsemble":
        st = None if self.state is None else self.state[rows]
        return PathEnsemble(self.grid, self.dB[rows], st, self.seed, self.substream_ids[rows])


def simulate_brownian(grid: TimeGrid, n_paths: int, d: int = 1, seed: int = 0,
                      workers: int = 1, first_path: int = 0) -> PathEnsemble:
    """Gaussian increments with variance dt; path p uses the substream (seed, first_path + p)."""
    if n_paths < 1 or d < 1:
        raise ConfigurationError("n_paths and d must be positive")
    if seed is None:
        raise ConfigurationError("an explicit seed is required")
    N = grid.n_steps
    dB = np.empty((n_paths, N, d))
    scale = np.sqrt(grid.dt)
    ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)

    def fill(lo, hi):
        for p in range(lo, hi):
            dB[p] = path_normals(seed, ids[p], N * d).reshape(N, d)
        dB[lo:hi] *= scale

    jobs = _chunks(n_paths, workers)
    if len(jobs) == 1:
        fill(*jobs[0])
    else:
        with ThreadPoolExecutor(len(jobs)) as pool:
            list(pool.map(lambda b: fill(*b), jobs))
    dB.setflags(write=False)
    ids.setflags(write=False)
    return PathEnsemble(grid, dB, None, int(seed), ids)


@dataclass(frozen=True)
class SdeSpec:
    """``dX = b(t, X) dt + sigma(t, X) dB`` with vectorised coefficient maps.

    ``drift(t, x)`` takes (n, l) states and returns (n, l); ``diffusion(t, x)``
    returns (n, l, d) or a broadcastable (l, d) matrix.
    """

    drift: Callable
    diffusion: Callable
    l: int = 1
    d: int = 1
    lipschitz_hint: Optional[float] = None
    name: str = "sde"

    @classmethod
    def brownian(cls, l: int = 1, scale: float = 1.0) -> "SdeSpec":
        eye = scale * np.eye(l)
        return cls(lambda t, x: np.zeros_like(x), lambda t, x: eye, l, l, 0.0 if scale else None,
                   f"{scale:g}*B" if scale != 1 else "B")

    @classmethod
    def ornstein_uhlenbeck(cls, theta: float = 1.0, scale: float = 1.0) -> "SdeSpec":
        return cls(lambda t, x: -theta * x, lambda t, x: np.array([[scale]]), 1, 1,
                   max(abs(theta), 0.0), "OU")

    def check_lipschitz(self, n_samples: int = 4096, seed: int = 0, radius: float = 5.0) -> float:
        """Largest sampled ratio |b(x1)-b(x2)| + |s(x1)-s(x2)| over |x1-x2|.

        Returns the ratio; compare with ``lipschitz_hint``.
        """
        rng = np.random.default_rng(seed)
        x1 = rng.uniform(-radius, radius, (n_samples, self.l))
        x2 = x1 + rng.normal(0, 0.1, (n_samples, self.l))
        t = rng.uniform(0, 1)
        db = np.linalg.norm(self.drift(t, x1) - self.drift(t, x2), axis=-1)
        s1 = np.broadcast_to(self.diffusion(t, x1), (n_samples, self.l, self.d))
        s2 = np.broadcast_to(self.diffusion(t, x2), (n_samples, self.l, self.d))
        ds = np.linalg.norm((s1 - s2).reshape(n_samples, -1), axis=-1)
        return float(np.max((db + ds) / np.linalg.norm(x1 - x2, axis=-1)))


def euler_maruyama(spec: SdeSpec, x0, grid: TimeGrid, ens: PathEnsemble) -> PathEnsemble:
    """Explicit Euler scheme started at ``(grid.start, x0)``; returns the ensemble with states."""
    if ens.dB.shape[1] != grid.n_steps or ens.d != spec.d:
        raise ConfigurationError("increments do not match grid or Brownian dimension")
    n, N = ens.n_paths, grid.n_steps
    x = np.empty((n, N + 1, spec.l))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (n, spec.l))
    dt = grid.dt
    with np.errstate(all="ignore"):
        for i in range(N):
            t = grid.time(i)
            xi = x[:, i]
            sig = np.broadcast_to(spec.diffusion(t, xi), (n, spec.l, spec.d))
            x[:, i + 1] = xi + spec.drift(t, xi) * dt + np.einsum("nld,nd->nl", sig, ens.dB[:, i])
            bad = ~np.isfinite(x[:, i + 1]).all(axis=1)
            if bad.any():
                p = int(np.flatnonzero(bad)[0])
                raise SimulationError("non-finite state", path=int(ens.substream_ids[p]), node=i + 1)
    return ens.with_state(x)


@dataclass(frozen=True)
class DomainSpec:
    """Closed domain given by a membership map on (n, l) states.

    ``contains(x)`` is True for points of the closure. ``interior(x)``, when
    supplied, is True for points of the open set; probes in the closure but
    not the interior are treated as regular boundary points (exit at time 0),
    which is a premise asserted per preset rather than tested.
    """

    contains: Callable
    description: str
    bounding_box: Optional[tuple] = None
    interior: Optional[Callable] = None

    def membership(self, x) -> np.ndarray:
        return np.asarray(self.contains(np.atleast_2d(x)), dtype=bool)

    @classmethod
    def interval(cls, a: float, b: float) -> "DomainSpec":
        return cls(lambda x: (x[:, 0] >= a) & (x[:, 0] <= b), f"[{a:g},{b:g}]", ((a,), (b,)),
                   lambda x: (x[:, 0] > a) & (x[:, 0] < b))

    @classmethod
    def ball(cls, center, radius: float) -> "DomainSpec":
        c = np.asarray(center, dtype=float)
        return cls(lambda x: np.linalg.norm(x - c, axis=-1) <= radius, f"ball(r={radius:g})",
                   (tuple(c - radius), tuple(c + radius)),
                   lambda x: np.linalg.norm(x - c, axis=-1) < radius)

    @classmethod
    def whole_space(cls) -> "DomainSpec":
        return cls(lambda x: np.ones(x.shape[0], dtype=bool), "R^l", None,
                   lambda x: np.ones(x.shape[0], dtype=bool))


def detect_exit(states: np.ndarray, domain: DomainSpec, grid: TimeGrid) -> TerminalTime:
    """First node outside the closed domain, else N; truncation_mass = share never exited."""
    n, np1 = states.shape[:2]
    idx = np.full(n, grid.n_steps, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for i in range(np1):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        out = ~domain.membership(states[rows, i])
        hit = rows[out]
        idx[hit] = i
        alive[hit] = False
    mass = float(alive.mean())
    if mass == 1.0:
        warnings.warn(f"no path left {domain.description} before the cap", RuntimeWarning)
    return TerminalTime("exit_time", idx, grid.n_steps, mass, domain.description)


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    std_err: float
    max_share: float
    heavy_tail: bool


def exp_moment_check(states: np.ndarray, gamma: float, q: float) -> MomentEstimate:
    """Monte Carlo estimate of E[exp(gamma * sup_s |X_s|^q)]."""
    if not 1 <= q < 2:
        raise ConfigurationError("q must lie in [1, 2)")
    r = np.linalg.norm(states, axis=-1) if states.ndim == 3 else np.abs(states)
    vals = np.exp(gamma * np.max(r, axis=1) ** q)
    share = float(vals.max() / vals.sum())
    heavy = share > 0.5
    if heavy:
        warnings.warn("exponential moment estimate dominated by a single path", RuntimeWarning)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
    return MomentEstimate(float(vals.mean()), se, share, heavy)


PATH_DUMP_SCHEMA = 1


def dump_paths_jsonl(ens: PathEnsemble, tau: Optional[TerminalTime], path, limit: Optional[int] = None):
    """One JSON record per path: {schema, path_id, nodes, states, exit_index}."""
    nodes = ens.grid.nodes.tolist()
    n = ens.n_paths if limit is None else min(limit, ens.n_paths)
    with open(path, "w") as fh:
        for p in range(n):
            rec = {
                "schema": PATH_DUMP_SCHEMA,
                "path_id": int(ens.substream_ids[p]),
                "nodes": nodes,
                "states": ens.state[p].tolist() if ens.state is not None else None,
                "exit_index": None if tau is None else int(tau.per_path_index[p]),
            }
            fh.write(json.dumps(rec) + "\n")
