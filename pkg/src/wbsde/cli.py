"""Batch experiment runner: ``wbsde run config.toml``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import re
import subprocess
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import jsonschema

from . import __version__
from .bsde_solver import (SolverSettings, contraction_ratios, picard_solve, residual_check,
                          validate_assumptions)
from .core import GeneratorSpec, TerminalCondition, WeightParams, describe
from .errors import ConfigurationError, SolverError
from .estimates import (CheckResult, apriori_check, continuous_dependence, loglog_slope,
                        stability_sequence, write_checks_csv)
from .feynman_kac import growth_bound_check, solve_table
from .fixtures import FIXTURES, catalogue, get_fixture, get_pde_preset
from .oracle import fd_elliptic, fd_parabolic, linear_bsde_pathwise
from .paths import derive_seed, dump_paths_jsonl
from .regression import RegressionBasis
from .transforms import clamped_data_generator, truncated_terminal

SCHEMA_VERSION = 1
ARTIFACT_ENV = "WBSDE_ARTIFACT_DIR"
KINDS = ("simulate", "solve", "apriori", "dependence", "stability", "feynman-kac", "validate", "refine")

_pos_int = {"type": "integer", "minimum": 1}
_weights = {
    "type": "object",
    "properties": {"beta": {"type": "number"}, "rho": {"type": "number"}, "rho_bar": {"type": "number"}},
    "additionalProperties": False,
}
_solver = {
    "type": "object",
    "properties": {
        "basis": {"enum": ["polynomial", "bins"]},
        "degree": {"type": "integer", "minimum": 0, "maximum": 8},
        "bins": {"type": "integer", "minimum": 1},
        "picard_max": _pos_int,
        "picard_tol": {"type": "number", "exclusiveMinimum": 0},
        "implicit_y": {"type": "boolean"},
        "inner_damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "inner_max": _pos_int,
        "ridge": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}
_number_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "wbsde experiment config",
    "type": "object",
    "required": ["seed", "experiment"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 63 - 1},
        "defaults": {
            "type": "object",
            "properties": {"n_paths": _pos_int, "n_steps": _pos_int, "workers": _pos_int},
            "additionalProperties": False,
        },
        "weights": _weights,
        "solver": _solver,
        "experiment": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": list(KINDS)},
                    "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "fixture": {"type": "string"},
                    "n_paths": _pos_int,
                    "n_steps": _pos_int,
                    "weights": _weights,
                    "solver": _solver,
                    "dump_paths": {"type": "integer", "minimum": 0},
                    "oracle": {"type": "boolean"},
                    "rel_tol": {"type": "number", "exclusiveMinimum": 0},
                    "contraction": {"type": "boolean"},
                    "t_probe": {"type": "number", "minimum": 0},
                    "deltas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                               "minItems": 2},
                    "slope_tol": {"type": "number", "exclusiveMinimum": 0},
                    "ns": {"type": "array", "items": _pos_int, "minItems": 2},
                    "preset": {"type": "string"},
                    "probes": {"type": "array", "minItems": 1},
                    "strict": {"type": "boolean"},
                    "fd_check": {"type": "boolean"},
                    "tol": {"type": "number", "exclusiveMinimum": 0},
                    "fd_tol": {"type": "number", "exclusiveMinimum": 0},
                    "growth": {"type": "boolean"},
                    "generator": {"type": "string"},
                    "expect": {"enum": ["pass", "fail"]},
                    "sample_budget": _pos_int,
                    "steps": {"type": "array", "items": _pos_int, "minItems": 2},
                    "paths_per_step": _pos_int,
                },
                "additionalProperties": False,
                "allOf": [
                    {"if": {"properties": {"kind": {"enum": ["simulate", "solve", "apriori", "dependence",
                                                             "stability", "refine"]}}},
                     "then": {"required": ["fixture"]}},
                    {"if": {"properties": {"kind": {"const": "dependence"}}}, "then": {"required": ["deltas"]}},
                    {"if": {"properties": {"kind": {"const": "stability"}}}, "then": {"required": ["ns"]}},
                    {"if": {"properties": {"kind": {"const": "feynman-kac"}}}, "then": {"required": ["preset"]}},
                    {"if": {"properties": {"kind": {"const": "refine"}}}, "then": {"required": ["steps"]}},
                    {"if": {"properties": {"kind": {"const": "validate"}}},
                     "then": {"anyOf": [{"required": ["fixture"]}, {"required": ["generator"]}]}},
                ],
            },
        },
    },
    "additionalProperties": False,
}


class ConfigError(Exception):
    """Schema or semantic problems; ``diagnostics`` holds one message per problem."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


def _locate(text: str, path) -> Optional[int]:
    """Best-effort 1-based line of the TOML entry at a JSON path such as ('experiment', 2, 'n_paths')."""
    lines = text.splitlines()
    start, table = 0, None
    parts = list(path)
    if parts and parts[0] == "experiment" and len(parts) > 1 and isinstance(parts[1], int):
        hdr = [i for i, ln in enumerate(lines) if re.match(r"\s*\[\[\s*experiment\s*\]\]", ln)]
        if parts[1] < len(hdr):
            start = hdr[parts[1]]
            if len(parts) == 2:
                return start + 1
            table, parts = "experiment", parts[2:]
    elif parts and parts[0] in ("weights", "solver", "defaults"):
        hdr = [i for i, ln in enumerate(lines) if re.match(rf"\s*\[\s*{parts[0]}\s*\]", ln)]
        if hdr:
            start, table, parts = hdr[0], parts[0], parts[1:]
    if not parts:
        return start + 1
    key = str(parts[0])
    for i in range(start, len(lines)):
        if i > start and table is not None and re.match(r"\s*\[", lines[i]):
            # a nested table of this experiment, e.g. [experiment.weights]
            if not re.match(rf"\s*\[\s*{table}\.{key}\s*\]", lines[i]):
                if not lines[i].strip().startswith(f"[{table}."):
                    break
            else:
                return i + 1
        if re.match(rf"\s*{re.escape(key)}\s*=", lines[i]) or re.match(rf"\s*\[\s*{re.escape(key)}\s*\]", lines[i]):
            return i + 1
    return None


def _where(text, path) -> str:
    dotted = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
    line = _locate(text, path)
    return f"line {line}, field {dotted or '<root>'}" if line else f"field {dotted or '<root>'}"


def _weights_from(table) -> WeightParams:
    return WeightParams(float(table.get("beta", 1.0)), float(table.get("rho", 2.0)),
                        None if "rho_bar" not in table else float(table["rho_bar"]))


def _solver_from(table, weights: WeightParams, implicit_default: bool = False) -> SolverSettings:
    basis = RegressionBasis(table.get("basis", "polynomial"), int(table.get("degree", 3)), int(table.get("bins", 16)))
    return SolverSettings(basis=basis, picard_max=int(table.get("picard_max", 20)),
                          picard_tol=float(table.get("picard_tol", 1e-8)),
                          implicit_y=bool(table.get("implicit_y", implicit_default)),
                          inner_damping=float(table.get("inner_damping", 1.0)),
                          inner_max=int(table.get("inner_max", 50)), ridge=float(table.get("ridge", 0.0)),
                          weights=weights)


def parse_config(text: str) -> dict:
    """Parse and validate config text; raises ConfigError with located diagnostics."""
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax error: {exc}"]) from None
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError([f"{_where(text, e.absolute_path)}: {e.message}" for e in errors])
    diags = []

    def semantic(path, fn):
        try:
            fn()
        except (ConfigurationError, ValueError) as exc:
            diags.append(f"{_where(text, path)}: {exc}")

    semantic(("weights",), lambda: _weights_from(cfg.get("weights", {})))
    for j, exp in enumerate(cfg["experiment"]):
        if "weights" in exp:
            semantic(("experiment", j, "weights"), lambda: _weights_from({**cfg.get("weights", {}), **exp["weights"]}))
        if "fixture" in exp:
            semantic(("experiment", j, "fixture"), lambda: get_fixture(exp["fixture"]))
        if "preset" in exp:
            semantic(("experiment", j, "preset"), lambda: get_pde_preset(exp["preset"]))
        if "generator" in exp and exp["generator"] not in VALIDATION_GENERATORS:
            diags.append(f"{_where(text, ('experiment', j, 'generator'))}: unknown generator "
                         f"{exp['generator']!r}; known: {', '.join(VALIDATION_GENERATORS)}")
        if exp["kind"] in ("solve", "refine") and exp.get("oracle", exp["kind"] == "refine") and "fixture" in exp:
            if exp["fixture"] in FIXTURES and not FIXTURES[exp["fixture"]].linear:
                diags.append(f"{_where(text, ('experiment', j, 'fixture'))}: no closed-form oracle for "
                             f"fixture {exp['fixture']!r}")
    names = [e.get("name", f"{j:02d}-{e['kind']}") for j, e in enumerate(cfg["experiment"])]
    for j, nm in enumerate(names):
        if names.index(nm) != j:
            diags.append(f"{_where(text, ('experiment', j, 'name'))}: duplicate experiment name {nm!r}")
    if diags:
        raise ConfigError(diags)
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file {path} does not exist"])
    return parse_config(p.read_text())


# --- experiments ----------------------------------------------------------


VALIDATION_GENERATORS = {
    "violator-y2": lambda: GeneratorSpec(lambda t, x, y, z: y ** 2, lambda t, x: (0.0, 0.0), name="y^2"),
    "violator-2absz": lambda: GeneratorSpec(lambda t, x, y, z: 2.0 * np.abs(z[:, :, 0]), lambda t, x: (0.0, 1.0),
                                            name="2|z|"),
}


@dataclass
class Context:
    seed: int
    name: str
    exp: dict
    outdir: Path
    weights: WeightParams
    solver_table: dict
    n_paths: int
    n_steps: int
    workers: int
    checks: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def path(self, suffix: str) -> Path:
        p = self.outdir / f"{self.name}.{suffix}"
        self.artifacts.append(p.name)
        return p

    def check(self, cid, lhs, rhs, se, passed):
        self.checks.append(CheckResult(f"{self.name}:{cid}", float(lhs), float(rhs), float(se), bool(passed)))

    def solver(self, implicit_default=False) -> SolverSettings:
        return _solver_from(self.solver_table, self.weights, implicit_default)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _build(ctx: Context, fid=None, n_paths=None, n_steps=None):
    fx = get_fixture(fid or ctx.exp["fixture"])
    return fx, fx.build(n_paths or ctx.n_paths, n_steps or ctx.n_steps, ctx.seed, ctx.weights, ctx.workers)


def _solve(ctx: Context, prob, g=None, xi=None):
    settings = ctx.solver(prob.fixture.implicit)
    return picard_solve(prob.generator if g is None else g, prob.xi if xi is None else xi, prob.ens, prob.tau,
                        settings)


def _oracle_y(prob, trace):
    return linear_bsde_pathwise(trace, prob.xi, prob.ens, prob.grid)


def run_simulate(ctx: Context):
    fx, prob = _build(ctx)
    ens, dt, n = prob.ens, prob.grid.dt, prob.ens.n_paths
    dump_paths_jsonl(ens, prob.tau, ctx.path("paths.jsonl"), limit=int(ctx.exp.get("dump_paths", 100)))
    rows = []
    for j in range(ens.d):
        inc = ens.dB[:, :, j].ravel()
        m, v = float(inc.mean()), float(inc.var(ddof=1))
        m_se, v_se = math.sqrt(dt / inc.size), dt * math.sqrt(2.0 / (inc.size - 1))
        rows.append((j, m, m_se, v, v_se, dt))
        ctx.check(f"increment-mean[{j}]", abs(m), 4 * m_se, m_se, abs(m) <= 4 * m_se)
        ctx.check(f"increment-var[{j}]", abs(v - dt), 4 * v_se, v_se, abs(v - dt) <= 4 * v_se)
    _write_rows(ctx.path("increments.csv"), ["component", "mean", "mean_se", "var", "var_se", "dt"], rows)
    if prob.tau.truncation_mass is not None:
        ctx.report["truncation_mass"] = prob.tau.truncation_mass


def run_solve(ctx: Context):
    fx, prob = _build(ctx)
    res = _solve(ctx, prob)
    est = res.estimate
    alpha = prob.generator.alpha_trace(prob.ens.state, prob.grid, res.trace)
    rc = residual_check(est, prob.generator, prob.xi, prob.ens, prob.tau, ctx.solver().basis, alpha)
    k = est.y.shape[2]
    rows = []
    for i, t in enumerate(prob.grid.nodes):
        live = prob.tau.per_path_index >= i
        ym = est.y[live, i].mean(axis=0) if live.any() else np.full(k, np.nan)
        zm = est.z[live, i].reshape(int(live.sum()), -1).mean(axis=0) if live.any() else np.full(k * prob.ens.d, np.nan)
        ri = min(i, prob.grid.n_steps - 1)
        rows.append([i, float(t), *map(float, ym), *map(float, zm), *map(float, rc.mean[ri]),
                     *map(float, rc.std_err[ri]), int(rc.flagged[ri]) if i < prob.grid.n_steps else 0])
    header = (["node", "t"] + [f"y{j}" for j in range(k)] + [f"z{j}" for j in range(k * prob.ens.d)]
              + [f"resid{j}" for j in range(k)] + [f"resid_se{j}" for j in range(k)] + ["flagged"])
    _write_rows(ctx.path("solution.csv"), header, rows)
    with open(ctx.path("report.jsonl"), "w") as fh:
        for m, d in enumerate(res.distances):
            fh.write(json.dumps({"schema": SCHEMA_VERSION, "iterate": m + 1, "distance": d}) + "\n")
    ctx.report.update(y0=est.y0.tolist(), distances=res.distances)
    ctx.check("residual", float(rc.flagged.sum()), 0, 0, rc.passed)
    if ctx.exp.get("oracle", False):
        oy = float(_oracle_y(prob, res.trace).y[:, 0].mean())
        rel = abs(float(est.y0[0]) - oy) / abs(oy)
        tol = float(ctx.exp.get("rel_tol", 0.02))
        ctx.report["oracle_y0"] = oy
        ctx.check("oracle-y0", rel, tol, 0.0, rel <= tol)
    if ctx.exp.get("contraction", False):
        ratios, se = contraction_ratios(res, seed=ctx.seed)
        bound = 1.0 / ctx.weights.rho
        _write_rows(ctx.path("contraction.csv"), ["m", "ratio", "stderr", "bound"],
                    [(m + 1, float(r), float(s), bound) for m, (r, s) in enumerate(zip(ratios, se))])
        if ratios.size < 4:
            ctx.check("contraction", float(ratios.size), 4, 0, False)
        for m in range(min(4, ratios.size)):
            ctx.check(f"contraction[{m + 1}]", ratios[m], bound + 3 * se[m], se[m], ratios[m] <= bound + 3 * se[m])


def run_apriori(ctx: Context):
    fx, prob = _build(ctx)
    res = _solve(ctx, prob)
    rep = apriori_check(res.estimate, prob.generator, prob.ens, ctx.weights, t_probe=float(ctx.exp.get("t_probe", 0.0)))
    write_checks_csv(rep.checks, ctx.path("apriori.csv"))
    ctx.report.update(constants=rep.constants, smallest_C=rep.smallest_C, weighted_a_term=rep.weighted_a_term)
    for c in rep.checks:
        ctx.check(c.check_id, c.lhs, c.rhs, c.std_err, c.passed)


def _shifted(xi: TerminalCondition, delta: float) -> TerminalCondition:
    return TerminalCondition(lambda ens, tau: xi(ens, tau) + delta, xi.k, None, f"{xi.name}+{delta:g}")


def run_dependence(ctx: Context):
    fx, prob = _build(ctx)
    base = _solve(ctx, prob)
    deltas = [float(d) for d in ctx.exp["deltas"]]
    rows, lhs = [], []
    for d in deltas:
        pert = _solve(ctx, prob, xi=_shifted(prob.xi, d))
        rep = continuous_dependence((base.estimate, prob.generator), (pert.estimate, prob.generator),
                                    prob.ens, base.trace)
        rows.append((d, rep.lhs, rep.lhs_se, rep.rhs_driver[0], rep.rhs_driver[1], rep.ratio[0], rep.ratio[1]))
        lhs.append(rep.lhs)
        for c in rep.checks:
            ctx.check(f"{c.check_id}[delta={d:g}]", c.lhs, c.rhs, c.std_err, c.passed)
    _write_rows(ctx.path("dependence.csv"),
                ["delta", "lhs", "lhs_se", "rhs_at_second", "rhs_at_first", "ratio_at_second", "ratio_at_first"], rows)
    slope = loglog_slope(deltas, lhs) if all(v > 0 for v in lhs) else float("nan")
    tol = float(ctx.exp.get("slope_tol", 0.3))
    ctx.report["slope"] = slope
    ctx.check("slope", slope, 2.0, tol, abs(slope - 2.0) <= tol)


def run_stability(ctx: Context):
    fx, prob = _build(ctx)
    g = prob.generator
    if g.alpha is None:
        raise ConfigurationError(f"fixture {fx.id} declares no alpha rule")
    limit = _solve(ctx, prob)
    alpha = g.alpha_trace(prob.ens.state, prob.grid, limit.trace)
    a_tau = alpha[np.arange(prob.ens.n_paths), prob.tau.per_path_index]
    xi_v = limit.estimate.xi
    seq = []
    for n in ctx.exp["ns"]:
        gn = clamped_data_generator(g, n)
        res = _solve(ctx, prob, g=gn, xi=truncated_terminal(xi_v, a_tau, n))
        seq.append((n, res.estimate, gn))
    tab = stability_sequence((limit.estimate, g), seq, prob.ens, limit.trace, alpha)
    _write_rows(ctx.path("stability.csv"), ["n", "premise", "premise_se", "distance", "distance_se"], tab.rows())
    p_ok = tab._trend_ok(tab.premise, tab.premise_se, tab.floor)
    d_ok = tab._trend_ok(tab.distance, tab.distance_se, tab.floor)
    ctx.check("premise-trend", tab.premise[-1], tab.premise[0], tab.premise_se[-1], p_ok)
    ctx.check("distance-trend", tab.distance[-1], tab.distance[0], tab.distance_se[-1], d_ok)


def run_feynman_kac(ctx: Context):
    spec, oracle = get_pde_preset(ctx.exp["preset"])
    if "probes" in ctx.exp:
        probes = tuple(tuple(p) if isinstance(p, list) else p for p in ctx.exp["probes"])
        spec = type(spec)(**{**spec.__dict__, "probes": probes})
    settings = ctx.solver()
    table = solve_table(spec, (ctx.n_paths, ctx.n_steps), ctx.seed, settings, oracle, ctx.workers,
                        bool(ctx.exp.get("strict", False)))
    table.write_csv(ctx.path("table.csv"))
    elliptic = spec.domain is not None
    tol = float(ctx.exp.get("tol", 0.05 if elliptic else 0.03))
    for row in table.rows:
        key = " ".join(f"{v:g}" for v in row.probe)
        err = abs(row.u - row.oracle)
        if elliptic:
            ctx.check(f"oracle[{key}]", err, tol, row.std_err, err <= tol)
            ctx.check(f"truncation[{key}]", row.truncation_mass, 0.005, 0.0, row.truncation_mass < 0.005)
        else:
            band = err + 4 * row.std_err
            ctx.check(f"oracle[{key}]", band, tol * abs(row.oracle), row.std_err, band <= tol * abs(row.oracle))
    if ctx.exp.get("fd_check", True):
        fd_tol = float(ctx.exp.get("fd_tol", 0.05 if elliptic else 0.03))
        fd = fd_elliptic(spec, nx=400) if elliptic else fd_parabolic(spec, nx=200)
        rows = []
        for row in table.rows:
            key = " ".join(f"{v:g}" for v in row.probe)
            ref = float(fd.at(row.space[0], None if elliptic else row.probe[0]))
            diff = abs(row.u - ref)
            ok = diff <= fd_tol if elliptic else diff <= fd_tol * abs(ref)
            rows.append((key, row.u, ref, diff))
            ctx.check(f"fd[{key}]", diff, fd_tol if elliptic else fd_tol * abs(ref), row.std_err, ok)
        _write_rows(ctx.path("fd.csv"), ["probe", "u", "u_fd", "abs_diff"], rows)
    if ctx.exp.get("growth", False):
        gv = growth_bound_check(table, spec.K, spec.p, spec.q)
        ctx.report["growth_C"] = gv.C
        ctx.check("growth", gv.C, 0.0, 0.0, gv.passed)


def run_validate(ctx: Context):
    if "generator" in ctx.exp:
        g, l = VALIDATION_GENERATORS[ctx.exp["generator"]](), 1
        label = ctx.exp["generator"]
    else:
        fx = get_fixture(ctx.exp["fixture"])
        g, _ = fx.make(ctx.weights)
        l, label = fx.sde.l, fx.id
    rep = validate_assumptions(g, int(ctx.exp.get("sample_budget", 20000)), ctx.seed, l=l)
    _write_rows(ctx.path("validate.csv"), ["condition", "violation", "verdict"],
                [("monotone-y", rep.monotone_violation, "PASS" if rep.monotone_pass else "FAIL"),
                 ("lipschitz-z", rep.lipschitz_violation, "PASS" if rep.lipschitz_pass else "FAIL"),
                 ("max-jump", rep.max_jump, "")])
    expect = ctx.exp.get("expect", "pass")
    ctx.report[label] = {"monotone": rep.monotone_violation, "lipschitz": rep.lipschitz_violation}
    ctx.check(f"expect-{expect}", max(rep.monotone_violation, rep.lipschitz_violation), 1e-9, 0.0,
              rep.passed == (expect == "pass"))


def run_refine(ctx: Context):
    rows = []
    per = int(ctx.exp.get("paths_per_step", max(1, ctx.n_paths // ctx.n_steps)))
    for N in ctx.exp["steps"]:
        fx, prob = _build(ctx, n_paths=per * N, n_steps=N)
        res = _solve(ctx, prob)
        oy = float(_oracle_y(prob, res.trace).y[:, 0].mean())
        y0 = float(res.estimate.y0[0])
        y1 = res.estimate.y[:, 1, 0]
        se = float(y1.std(ddof=1) / math.sqrt(y1.size))
        rows.append((N, per * N, y0, oy, abs(y0 - oy), se))
    _write_rows(ctx.path("refine.csv"), ["n_steps", "n_paths", "y0", "oracle", "abs_err", "stderr"], rows)
    errs = [r[4] for r in rows]
    ses = [r[5] for r in rows]
    ok = all(errs[j + 1] <= errs[j] + 2 * math.hypot(ses[j], ses[j + 1]) for j in range(len(errs) - 1))
    ctx.check("monotone", errs[-1], errs[0], ses[-1], ok)


RUNNERS = {
    "simulate": run_simulate, "solve": run_solve, "apriori": run_apriori, "dependence": run_dependence,
    "stability": run_stability, "feynman-kac": run_feynman_kac, "validate": run_validate, "refine": run_refine,
}


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def artifact_root(override: Optional[str] = None) -> Path:
    return Path(override or os.environ.get(ARTIFACT_ENV) or "artifacts")


def run(config_path, artifact_dir: Optional[str] = None, workers: Optional[int] = None, stream=None) -> int:
    """Run every experiment of a config. Returns the process exit status."""
    stream = stream or sys.stdout
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"{config_path}: {d}", file=sys.stderr)
        return 2
    text = Path(config_path).read_text()
    run_name = cfg.get("name", Path(config_path).stem)
    outdir = artifact_root(artifact_dir) / run_name
    outdir.mkdir(parents=True, exist_ok=True)
    defaults = cfg.get("defaults", {})
    n_workers = int(workers or defaults.get("workers", 1))
    t_start = time.time()
    seed = int(cfg["seed"])
    all_checks, exp_records = [], []
    for j, exp in enumerate(cfg["experiment"]):
        name = exp.get("name", f"{j:02d}-{exp['kind']}")
        weights = _weights_from({**cfg.get("weights", {}), **exp.get("weights", {})})
        ctx = Context(derive_seed(seed, j), name, exp, outdir, weights,
                      {**cfg.get("solver", {}), **exp.get("solver", {})},
                      int(exp.get("n_paths", defaults.get("n_paths", 10000))),
                      int(exp.get("n_steps", defaults.get("n_steps", 64))), n_workers)
        t0 = time.time()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                RUNNERS[exp["kind"]](ctx)
            except (SolverError, ConfigurationError) as exc:
                ctx.check("error", 0, 0, 0, False)
                ctx.report["error"] = f"{type(exc).__name__}: {exc}"
        ctx.report["warnings"] = sorted({str(w.message) for w in caught})
        write_checks_csv(ctx.checks, ctx.path("checks.csv"))
        for c in ctx.checks:
            print(f"{c.verdict} {c.check_id} lhs={c.lhs:.6g} rhs={c.rhs:.6g} stderr={c.std_err:.3g}", file=stream)
        all_checks.extend(ctx.checks)
        exp_records.append({"name": name, "kind": exp["kind"], "seed": ctx.seed, "config": exp,
                            "weights": describe(weights), "solver": describe(ctx.solver()),
                            "n_paths": ctx.n_paths, "n_steps": ctx.n_steps, "artifacts": ctx.artifacts,
                            "report": describe(ctx.report), "wall_time": time.time() - t0,
                            "checks": [[c.check_id, c.verdict] for c in ctx.checks]})
    failing = [c.check_id for c in all_checks if not c.passed]
    manifest = {
        "schema": SCHEMA_VERSION, "package_version": __version__, "config": str(Path(config_path).resolve()),
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(), "seed": seed, "workers": n_workers,
        "git_describe": _git_describe(), "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(t_start)),
        "wall_time": time.time() - t_start, "experiments": exp_records, "failing_checks": failing,
        "exit_status": 1 if failing else 0,
    }
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    if failing:
        print("failing checks: " + ", ".join(failing), file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wbsde", description="Weighted BSDE experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiments of a config file")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None, help="cap on worker threads (results do not change)")
    p_run.add_argument("--artifact-dir", default=None, help=f"output root (default ${ARTIFACT_ENV} or ./artifacts)")
    p_list = sub.add_parser("list-fixtures", help="print the fixture catalogue")
    p_list.add_argument("--json", action="store_true")
    p_val = sub.add_parser("validate-config", help="check a config against the schema")
    p_val.add_argument("config")
    p_schema = sub.add_parser("schema", help="print the config JSON schema")
    args = parser.parse_args(argv)

    if args.command == "run":
        if args.workers is not None and args.workers < 1:
            parser.error("--workers must be at least 1")
        return run(args.config, args.artifact_dir, args.workers)
    if args.command == "list-fixtures":
        rows = catalogue()
        if args.json:
            print(json.dumps([{"id": i, "recipe": r, "exercises": e} for i, r, e in rows], indent=2))
        else:
            for i, r, e in rows:
                print(f"{i}\n    recipe:    {r}\n    exercises: {e}")
        return 0
    if args.command == "validate-config":
        try:
            load_config(args.config)
        except ConfigError as exc:
            for d in exc.diagnostics:
                print(f"{args.config}: {d}", file=sys.stderr)
            return 2
        print(f"{args.config}: ok")
        return 0
    print(json.dumps(CONFIG_SCHEMA, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
