"""Experiment driver: convergence and timing tables as CSV.

Two experiments are available.  ``run_uniform`` runs full multigrid on a
uniformly refined hierarchy and reports errors and times per level;
``run_adaptive`` runs the adaptive loop on the L-shaped domain.  Problems
without a closed-form solution are measured against a Newton solution on
one further uniform refinement.
"""

from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .assemble import NonlinearEvaluationError, assemble_mass, energy_norm, lipschitz_ratio, monotonicity_gap
from .correction import CorrectionError
from .estimator import adaptive_fmg
from .fespace import build_fespace
from .fmg import FMGConfig, FMGError, base_mesh, build_hierarchy, full_multigrid, newton_reference_solve
from .problems import PROBLEMS, get_problem

__all__ = [
    "BenchConfig",
    "BenchError",
    "ConfigError",
    "PostconditionError",
    "UNIFORM_COLUMNS",
    "ADAPTIVE_COLUMNS",
    "run_uniform",
    "run_adaptive",
    "check_postconditions",
    "emit_csv",
    "read_config_file",
]

UNIFORM_COLUMNS = ("level", "N_k", "energy_error", "l2_error", "level_time_s",
                   "cumulative_time_s", "nonlinear_iters")
ADAPTIVE_COLUMNS = ("iter", "N", "eta_total", "time_s")
TIME_COLUMNS = {"level_time_s", "cumulative_time_s", "time_s"}


class BenchError(Exception):
    """Base class; ``category`` and ``exit_code`` are reported by the CLI."""

    category = "internal"
    exit_code = 1


class ConfigError(BenchError, ValueError):
    category = "config"
    exit_code = 2


class UnknownProblemError(ConfigError):
    category = "problem"
    exit_code = 3


class SolverError(BenchError):
    category = "solver"
    exit_code = 4


class PostconditionError(BenchError):
    category = "postcondition"
    exit_code = 5


class OutputError(BenchError, OSError):
    category = "io"
    exit_code = 6


@dataclass(frozen=True)
class BenchConfig:
    problem: str = "example1"
    levels: int = 5
    base: int = 4
    m: int = 2
    p: int = 1
    coarse_index: int = 1
    adaptive: bool = False
    theta_mark: float = 0.5
    iters: int = 15
    out: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise UnknownProblemError(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        if not 2 <= self.levels <= 10:
            raise ConfigError(f"levels must lie in [2, 10], got {self.levels}")
        if not 1 <= self.m <= 10:
            raise ConfigError(f"m must lie in [1, 10], got {self.m}")
        if not 1 <= self.p <= 5:
            raise ConfigError(f"p must lie in [1, 5], got {self.p}")
        if not 0.0 < self.theta_mark < 1.0:
            raise ConfigError(f"theta_mark must lie in (0, 1), got {self.theta_mark}")
        if self.base < 1:
            raise ConfigError(f"base must be positive, got {self.base}")
        if not 1 <= self.coarse_index <= self.levels:
            raise ConfigError(f"coarse_index must lie in [1, levels], got {self.coarse_index}")
        if self.iters < 0:
            raise ConfigError(f"iters must be nonnegative, got {self.iters}")

    @property
    def fmg_config(self) -> FMGConfig:
        return FMGConfig(m=self.m, p=self.p)


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(BenchConfig)}
    kind = kinds[name]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    known = {f.name for f in fields(BenchConfig)}
    aliases = {"iterations": "iters", "theta": "theta_mark"}
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = aliases.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def _oracle_errors(hierarchy, problem, n_levels):
    """Errors of level iterates measured on level ``n_levels + 1`` against its Newton solution."""
    fine = n_levels + 1
    u_ref = newton_reference_solve(hierarchy, fine, problem)
    A = hierarchy.stiffness(fine)
    M = assemble_mass(hierarchy.space(fine), hierarchy.quad)

    def errors(k, u):
        e = u_ref - hierarchy.prolong(u, k, fine)
        return energy_norm(A, e), float(np.sqrt(max(e @ (M @ e), 0.0)))

    return errors


def run_uniform(cfg: BenchConfig, problem=None):
    """Full multigrid on ``cfg.levels`` uniform levels; one row per level.

    Returns ``(rows, run_record)``.
    """
    if cfg.adaptive:
        raise ConfigError("run_uniform needs a non-adaptive config")
    problem = get_problem(cfg.problem) if problem is None else problem
    n = cfg.levels
    try:
        n_build = n if problem.has_exact else n + 1
        hierarchy = build_hierarchy(problem, n_build, cfg.base, cfg.coarse_index)
        error_fn = "exact" if problem.has_exact else _oracle_errors(hierarchy, problem, n)
        _, record = full_multigrid(hierarchy, problem, cfg.fmg_config, n_levels=n, error_fn=error_fn)
    except (FMGError, CorrectionError, NonlinearEvaluationError) as exc:
        raise SolverError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = [
        dict(zip(UNIFORM_COLUMNS, (r.level, r.n_dofs, r.energy_error, r.l2_error, r.time_s,
                                   r.cumulative_s, r.nonlinear_iters)))
        for r in record.levels
    ]
    return rows, record


def run_adaptive(cfg: BenchConfig, problem=None):
    """Adaptive loop on the problem's domain; one row per iteration.

    The start mesh is the problem's base mesh at ``cfg.base``.  Zero
    iterations give no rows.  Returns ``(rows, adaptive_run)``.
    """
    problem = get_problem(cfg.problem) if problem is None else problem
    if cfg.iters == 0:
        return [], None
    try:
        mesh = base_mesh(problem.domain, cfg.base)
        _, run = adaptive_fmg(problem, mesh, cfg.iters, cfg.theta_mark, cfg.fmg_config)
    except (FMGError, CorrectionError, NonlinearEvaluationError) as exc:
        raise SolverError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = [dict(zip(ADAPTIVE_COLUMNS, (r.iteration, r.n_dofs, r.eta_total, r.time_s)))
            for r in run.iterations]
    return rows, run


def check_postconditions(cfg: BenchConfig, rows, problem=None) -> list:
    """Problems found in a finished run; empty when all postconditions hold.

    Besides table sanity this samples the monotonicity and Lipschitz
    properties of the nonlinear term with the config seed.
    """
    problem = get_problem(cfg.problem) if problem is None else problem
    issues = []
    for row in rows:
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                issues.append(f"row {row}: {key} is not finite")
            elif isinstance(value, (int, float)) and value < 0:
                issues.append(f"row {row}: {key} is negative")
    sizes = [row.get("N_k", row.get("N")) for row in rows]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        issues.append(f"dof counts are not increasing: {sizes}")
    rng = np.random.default_rng(cfg.seed)
    space = build_fespace(base_mesh(problem.domain, cfg.base))
    gap = monotonicity_gap(space, problem.nonlinear, rng, bound=2.0)
    if gap < -1e-12:
        issues.append(f"nonlinear term not monotone on sampled pairs (gap {gap:.3e})")
    ratio, bound = lipschitz_ratio(space, problem.nonlinear, rng, bound=2.0)
    if ratio > bound * (1 + 1e-12) + 1e-14:
        issues.append(f"Lipschitz ratio {ratio:.3e} exceeds the bound {bound:.3e}")
    return issues


def _format(key, value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if key in TIME_COLUMNS:
        return "%.3f" % float(value)
    return "%.17g" % float(value)


def emit_csv(rows, path=None, columns=None) -> str:
    """Write rows as CSV: header first, floats with 17 significant digits, times to the millisecond.

    ``path`` of ``None`` or ``"-"`` writes to stdout.  Returns the text.
    """
    if columns is None:
        if not rows:
            raise ValueError("columns are needed to write an empty table")
        columns = list(rows[0])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(c, row[c]) for c in columns])
    text = buf.getvalue()
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return text
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return text


def config_from_args(args, adaptive: bool) -> BenchConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(BenchConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values["adaptive"] = adaptive
    if adaptive:
        values.setdefault("problem", "example4")
    try:
        return BenchConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

