"""Configuration loading, pipeline orchestration and artifact output.

A run reads one JSON configuration, executes the stages up to the one
named by the command and writes CSV and JSON artifacts into the output
directory.  Every artifact is written to a temporary file first and renamed
into place, so an interrupted run never leaves a truncated file under a
final name.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io as _stdio
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import __version__
from .analysis import (AnalysisError, check_monotonicity, clamp_consistency, criterion_table,
                       dry_region_chi_law, extract_profile, modulus_report, reconstruction_change,
                       support_identity_defect)
from .exprlang import ExprError
from .flow import FlowChart, FlowError, IntegratorOptions
from .geometry import PROBLEM_ASSUMPTIONS, Domain, GeometryError, validate
from .problem import ProblemData, ProblemError
from .solver import OUTER_METHODS, SolverParams, assemble, outer_fixed_point, residuals
from .transform import T_LOW_MODES, TransformError, build_grid, coefficients, grid_rows

COMMANDS = ("validate", "flow", "solve", "check-continuity", "all")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_SOLVER = 4
EXIT_ANALYSIS = 5

FIELD_KEYS = ("H1", "H2", "a11", "a12", "a21", "a22", "beta", "phi")
REQUIRED_FIELDS = ("H1", "H2", "beta", "phi")
CSV_KINDS = ("orbits", "grid", "solution", "trace", "free_boundary")

DEFAULTS: dict[str, dict[str, Any]] = {
    "flow": {"h": 0.0, "w_range": None, "method": "RK45", "rtol": 1e-10, "atol": 1e-12},
    "grid": {"N_w": 65, "N_s": 65, "t_low_mode": "alpha_minus"},
    "solver": {"omega": 0.5, "sor_omega": 1.5, "lcp_tol": 1e-10, "cap_factor": 20,
               "tol_chi": 1e-8, "tol_u": 1e-8, "max_outer": 200, "support_floor": 1e-12,
               "warm_start": True, "method": "search", "theta_tol": None},
    "validation": {"samples": 64, "boundary_samples": 512},
    "analysis": {"n_bumps": 50, "seed": 0, "band_cells": 3, "resolutions": 3},
    "outputs": {"directory": "fbflow-out", "csv": list(CSV_KINDS)},
}

SOLUTION_COLUMNS = ("w", "s", "t", "x1", "x2", "u", "chi")
TRACE_COLUMNS = ("iteration", "phase", "delta_chi", "delta_u", "u_max", "sweeps", "lcp_residual",
                 "wet_columns", "clamps")
FREE_BOUNDARY_COLUMNS = ("w", "Phi_h", "x1", "x2", "exit_on_gamma3", "lhs_35", "rhs_35", "margin")
ORBIT_COLUMNS = ("w", "t", "x1", "x2", "Y_h")
GRID_COLUMNS = ("w", "s", "t", "x1", "x2", "h", "a11", "a12", "a21", "a22", "mu")

# thresholds of the assertions checked by a run
COMPLEMENTARITY_TOL = 1e-8
MONOTONICITY_TOL = 1e-8
WEAK_RESIDUAL_TOL = 1e-7
SIGN_CHECK_TOL = 1e-8


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

def _check_number(section: str, key: str, value, *, lo=None, hi=None, lo_open=False, hi_open=False,
                  integer=False):
    name = f"{section}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    if integer and (not float(value).is_integer()):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not math.isfinite(float(value)):
        raise ConfigError(f"{name} must be finite")
    v = float(value)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(f"{name}={value} is out of range ({'(' if lo_open else '['}{lo}, "
                          f"{hi if hi is not None else 'inf'}{')' if hi_open or hi is None else ']'})")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(f"{name}={value} is out of range ({'(' if lo_open else '['}{lo}, "
                          f"{hi}{')' if hi_open else ']'})")
    return int(v) if integer else v


def _check_choice(section: str, key: str, value, choices):
    if value not in choices:
        raise ConfigError(f"{section}.{key} must be one of {list(choices)}, got {value!r}")
    return value


@dataclass
class RunConfig:
    geometry: dict
    fields: dict
    flow: dict
    grid: dict
    solver: dict
    validation: dict
    analysis: dict
    outputs: dict
    source: str | None = None

    SECTIONS = ("geometry", "fields", "flow", "grid", "solver", "validation", "analysis", "outputs")

    def to_dict(self) -> dict:
        return {s: copy.deepcopy(getattr(self, s)) for s in self.SECTIONS}

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    # -- builders ------------------------------------------------------------
    def domain(self) -> Domain:
        return Domain.from_dict(self.geometry)

    def problem(self) -> ProblemData:
        return ProblemData.from_dict(self.domain(), self.fields)

    def integrator_options(self) -> IntegratorOptions:
        f = self.flow
        return IntegratorOptions(method=f["method"], rtol=f["rtol"], atol=f["atol"])

    def solver_params(self) -> SolverParams:
        s = self.solver
        return SolverParams(omega=s["omega"], sor_omega=s["sor_omega"], lcp_tol=s["lcp_tol"],
                            cap_factor=s["cap_factor"], tol_chi=s["tol_chi"], tol_u=s["tol_u"],
                            max_outer=s["max_outer"], support_floor=s["support_floor"],
                            warm_start=s["warm_start"], method=s["method"])

    def with_overrides(self, out: str | None = None, grid: tuple[int, int] | None = None,
                       tol: float | None = None) -> "RunConfig":
        doc = self.to_dict()
        if out is not None:
            doc["outputs"]["directory"] = str(out)
        if grid is not None:
            doc["grid"]["N_w"], doc["grid"]["N_s"] = int(grid[0]), int(grid[1])
        if tol is not None:
            doc["solver"]["lcp_tol"] = float(tol)
        return parse_config(doc, self.source)


def parse_config(doc: Mapping[str, Any], source: str | None = None) -> RunConfig:
    """Validate a configuration document and fill in the defaults."""
    if not isinstance(doc, Mapping):
        raise ConfigError("the configuration must be a JSON object")
    unknown = set(doc) - set(RunConfig.SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    for name in ("geometry", "fields"):
        if name not in doc:
            raise ConfigError(f"section {name} is required")
    sections: dict[str, dict] = {}
    for name in RunConfig.SECTIONS:
        raw = doc.get(name, {})
        if not isinstance(raw, Mapping):
            raise ConfigError(f"section {name} must be an object")
        if name in DEFAULTS:
            extra = set(raw) - set(DEFAULTS[name])
            if extra:
                raise ConfigError(f"{name}.{sorted(extra)[0]} is not a known key")
            merged = copy.deepcopy(DEFAULTS[name])
            merged.update(copy.deepcopy(dict(raw)))
            sections[name] = merged
        else:
            sections[name] = copy.deepcopy(dict(raw))

    fields = sections["fields"]
    extra = set(fields) - set(FIELD_KEYS)
    if extra:
        raise ConfigError(f"fields.{sorted(extra)[0]} is not a known key")
    for key in REQUIRED_FIELDS:
        if key not in fields:
            raise ConfigError(f"fields.{key} is required")
    for key, value in fields.items():
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"fields.{key} must be an expression string or a number")
        fields[key] = str(value)

    geo = sections["geometry"]
    if not isinstance(geo.get("arcs"), list) or not geo["arcs"]:
        raise ConfigError("geometry.arcs must be a nonempty list")

    f = sections["flow"]
    f["h"] = _check_number("flow", "h", f["h"])
    if f["w_range"] is not None:
        wr = f["w_range"]
        if not isinstance(wr, list) or len(wr) != 2:
            raise ConfigError("flow.w_range must be null or a pair [lo, hi]")
        lo = _check_number("flow", "w_range[0]", wr[0])
        hi = _check_number("flow", "w_range[1]", wr[1])
        if lo >= hi:
            raise ConfigError("flow.w_range must satisfy lo < hi")
        f["w_range"] = [lo, hi]
    _check_choice("flow", "method", f["method"], ("RK45", "DOP853", "RK23"))
    f["rtol"] = _check_number("flow", "rtol", f["rtol"], lo=0.0, lo_open=True, hi=1e-3)
    f["atol"] = _check_number("flow", "atol", f["atol"], lo=0.0, lo_open=True, hi=1e-3)

    g = sections["grid"]
    g["N_w"] = _check_number("grid", "N_w", g["N_w"], lo=3, hi=2049, integer=True)
    g["N_s"] = _check_number("grid", "N_s", g["N_s"], lo=3, hi=2049, integer=True)
    _check_choice("grid", "t_low_mode", g["t_low_mode"], T_LOW_MODES)

    s = sections["solver"]
    s["omega"] = _check_number("solver", "omega", s["omega"], lo=0.0, lo_open=True, hi=1.0)
    s["sor_omega"] = _check_number("solver", "sor_omega", s["sor_omega"], lo=0.0, lo_open=True,
                                   hi=2.0, hi_open=True)
    for key in ("lcp_tol", "tol_chi", "tol_u"):
        s[key] = _check_number("solver", key, s[key], lo=0.0, lo_open=True, hi=1e-2)
    s["support_floor"] = _check_number("solver", "support_floor", s["support_floor"], lo=0.0, hi=1e-2)
    s["cap_factor"] = _check_number("solver", "cap_factor", s["cap_factor"], lo=1, integer=True)
    s["max_outer"] = _check_number("solver", "max_outer", s["max_outer"], lo=1, integer=True)
    if not isinstance(s["warm_start"], bool):
        raise ConfigError("solver.warm_start must be true or false")
    _check_choice("solver", "method", s["method"], OUTER_METHODS)
    if s["theta_tol"] is not None:
        s["theta_tol"] = _check_number("solver", "theta_tol", s["theta_tol"], lo=0.0, lo_open=True)

    v = sections["validation"]
    v["samples"] = _check_number("validation", "samples", v["samples"], lo=4, integer=True)
    v["boundary_samples"] = _check_number("validation", "boundary_samples", v["boundary_samples"],
                                          lo=8, integer=True)

    a = sections["analysis"]
    a["n_bumps"] = _check_number("analysis", "n_bumps", a["n_bumps"], lo=0, integer=True)
    a["seed"] = _check_number("analysis", "seed", a["seed"], lo=0, integer=True)
    a["band_cells"] = _check_number("analysis", "band_cells", a["band_cells"], lo=1, integer=True)
    a["resolutions"] = _check_number("analysis", "resolutions", a["resolutions"], lo=2, hi=5, integer=True)

    o = sections["outputs"]
    if not isinstance(o["directory"], str) or not o["directory"]:
        raise ConfigError("outputs.directory must be a nonempty string")
    if not isinstance(o["csv"], list):
        raise ConfigError("outputs.csv must be a list")
    for kind in o["csv"]:
        _check_choice("outputs", "csv", kind, CSV_KINDS)

    cfg = RunConfig(**sections, source=source)
    # expressions and geometry must build
    try:
        cfg.problem()
    except (ProblemError, ExprError) as exc:
        raise ConfigError(str(exc)) from exc
    except GeometryError as exc:
        raise ConfigError(f"geometry: {exc}") from exc
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"geometry: malformed arc ({exc})") from exc
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    """Read and validate a JSON configuration file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return parse_config(doc, str(p))


# ----------------------------------------------------------------------------
# Artifact output
# ----------------------------------------------------------------------------

def _plain(obj):
    """JSON-ready copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def atomic_write(path: Path, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_bytes(columns, rows) -> bytes:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    return buf.getvalue().encode()


def json_bytes(obj) -> bytes:
    return (json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n").encode()


class _Artifacts:
    def __init__(self, directory: Path):
        self.directory = directory
        self.hashes: dict[str, str] = {}

    def write(self, name: str, data: bytes):
        atomic_write(self.directory / name, data)
        self.hashes[name] = hashlib.sha256(data).hexdigest()


# ----------------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------------

@dataclass
class RunReport:
    command: str
    exit_code: int = EXIT_OK
    error: str | None = None
    checks: list = field(default_factory=list)
    validation: dict | None = None
    solver: dict | None = None
    analysis: dict | None = None
    artifacts: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def check(self, name: str, passed: bool, value, threshold=None, kind: str = "assertion", note: str = ""):
        """Record one check; ``kind`` is ``assertion`` (fails the run) or ``verdict`` (reported only)."""
        self.checks.append({"name": name, "kind": kind, "passed": bool(passed), "value": value,
                            "threshold": threshold, "note": note})

    @property
    def failed_assertions(self) -> list[str]:
        return [c["name"] for c in self.checks if c["kind"] == "assertion" and not c["passed"]]

    def to_dict(self) -> dict:
        return _plain({"command": self.command, "exit_code": self.exit_code, "error": self.error,
                       "checks": self.checks, "validation": self.validation, "solver": self.solver,
                       "analysis": self.analysis, "artifacts": self.artifacts,
                       "provenance": self.provenance})


class _StageFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------------

def _stage_validate(cfg: RunConfig, pd: ProblemData, report: RunReport, out: _Artifacts):
    v = cfg.validation
    rep = validate(pd, samples=v["samples"], boundary_samples=v["boundary_samples"])
    report.validation = rep.to_dict()
    for name, chk in rep.checks.items():
        kind = "assertion" if name in PROBLEM_ASSUMPTIONS else "verdict"
        report.check(f"validation.{name}", chk.status != "fail", chk.value, kind=kind, note=chk.note)
    out.write("validation.json", json_bytes(rep.to_dict()))
    failed = [n for n in rep.failures if n in PROBLEM_ASSUMPTIONS]
    if failed:
        raise _StageFailure(EXIT_VALIDATION, f"problem assumptions violated: {failed}")


def _build_grid(cfg: RunConfig, pd: ProblemData, N_w: int, N_s: int, chart: FlowChart | None = None):
    try:
        if chart is None:
            chart = FlowChart(pd, cfg.flow["h"], cfg.flow["w_range"], cfg.integrator_options())
        return build_grid(pd, cfg.flow["h"], N_w=N_w, N_s=N_s, t_low_mode=cfg.grid["t_low_mode"],
                          chart=chart)
    except (FlowError, TransformError, GeometryError) as exc:
        raise _StageFailure(EXIT_VALIDATION, f"chart construction failed: {exc}") from exc


def _stage_flow(cfg: RunConfig, pd: ProblemData, out: _Artifacts):
    grid = _build_grid(cfg, pd, cfg.grid["N_w"], cfg.grid["N_s"])
    co = coefficients(grid)
    kinds = cfg.outputs["csv"]
    if "orbits" in kinds:
        out.write("orbits.csv", csv_bytes(ORBIT_COLUMNS, grid.chart.orbit_rows(grid.w)))
    if "grid" in kinds:
        out.write("grid.csv", csv_bytes(GRID_COLUMNS, grid_rows(grid, co)))
    return grid, co


def _solve(cfg: RunConfig, grid, co):
    system = assemble(grid, co)
    pair = outer_fixed_point(system, cfg.solver_params())
    return system, pair


def _stage_solve(cfg: RunConfig, grid, co, report: RunReport, out: _Artifacts):
    system, pair = _solve(cfg, grid, co)
    res = residuals(pair, system, cfg.analysis["band_cells"])
    unorm = float(np.max(np.abs(pair.u), initial=0.0))
    summary = {"converged": pair.converged, "lcp_flagged": pair.lcp_flagged,
               "iterations": len(pair.trace), "initialization": pair.initialization,
               "extent_eps": pair.extent_eps, "clamp_events": pair.clamp_events,
               "u_max": unorm, "wet_columns": int(np.count_nonzero(pair.top_wet >= 0)),
               "mixed_columns": int(np.count_nonzero(pair.mixed)) if pair.mixed is not None else 0}
    report.solver = summary
    kinds = cfg.outputs["csv"]
    if "solution" in kinds:
        rows = []
        nw, ns = grid.shape
        U, CHI = pair.U, pair.CHI
        for j in range(nw):
            for i in range(ns):
                rows.append((grid.w[j], grid.s[i], grid.t[j, i], grid.X[j, i, 0], grid.X[j, i, 1],
                             U[j, i], CHI[j, i]))
        out.write("solution.csv", csv_bytes(SOLUTION_COLUMNS, rows))
    if "trace" in kinds:
        out.write("trace.csv", csv_bytes(TRACE_COLUMNS, [[t[c] for c in TRACE_COLUMNS] for t in pair.trace]))
    out.write("residuals.json", json_bytes({**res, **summary}))

    report.check("solver.converged", pair.converged and not pair.lcp_flagged, len(pair.trace),
                 kind="verdict", note="outer iteration and every inner solve converged")
    defect = res["complementarity_defect"] / max(unorm, 1e-300) if unorm > 0 else 0.0
    report.check("complementarity", defect <= COMPLEMENTARITY_TOL, defect, COMPLEMENTARITY_TOL,
                 note="max |u (1 - chi)| / max |u|")
    bounds = float(min(np.min(pair.u), np.min(pair.chi), 1.0 - np.max(pair.chi)))
    report.check("bounds", bounds >= 0.0, bounds, 0.0, note="min of u, chi and 1 - chi")
    report.check("weak_residual_interior", res["weak_residual_interior"] <= WEAK_RESIDUAL_TOL,
                 res["weak_residual_interior"], WEAK_RESIDUAL_TOL,
                 note=f"relative, outside a {res['band_cells']}-cell band around the free boundary")
    report.check("sign_check", res["sign_check_min"] >= -SIGN_CHECK_TOL, res["sign_check_min"],
                 -SIGN_CHECK_TOL)
    report.check("gamma2_inequality", res["gamma2_inequality_residual"] <= SIGN_CHECK_TOL,
                 res["gamma2_inequality_residual"], SIGN_CHECK_TOL,
                 note="largest relative residual on Dirichlet nodes (must not be positive)")
    if not (pair.converged and not pair.lcp_flagged):
        raise _StageFailure(EXIT_SOLVER, "the solver did not converge")
    return system, pair


def _analyze(cfg: RunConfig, pd: ProblemData, grid, system, pair):
    try:
        profile = extract_profile(pair, grid, cfg.solver["theta_tol"])
    except AnalysisError as exc:
        raise _StageFailure(EXIT_SOLVER, f"free-boundary extraction failed: {exc}") from exc
    crit = criterion_table(profile, grid, pd)
    return profile, crit


def _stage_analyze(cfg: RunConfig, pd: ProblemData, grid, system, pair, report: RunReport, out: _Artifacts):
    a = cfg.analysis
    profile, crit = _analyze(cfg, pd, grid, system, pair)
    mono = check_monotonicity(pair, grid, a["n_bumps"], a["seed"])
    dry = dry_region_chi_law(pair, grid, system, pd)
    bad_clamps = clamp_consistency(pair, crit)
    support = support_identity_defect(profile, grid)
    cert = reconstruction_change(pair, system, cfg.solver["support_floor"])
    holds = [c["holds"] for c in crit]
    analysis = {
        "profile": {"threshold": profile.threshold, "sentinel_columns": int(profile.sentinel.sum()),
                    "columns": len(profile.w)},
        "monotonicity": {"max_forward_jump": mono.max_forward_jump, "min_bump_integral": mono.min_bump_integral,
                         "n_bumps": mono.n_bumps},
        "dry_law": {"formula_mismatch": dry.formula_mismatch, "block_residual": dry.block_residual,
                    "block_nodes": dry.block_nodes, "constant": dry.constant,
                    "branch1_max_chi": dry.branch1_max_chi, "clamped_nodes": dry.clamped_nodes},
        "continuity": {"columns_checked": len(crit), "columns_holding": int(sum(holds)),
                       "min_margin": min((c["margin"] for c in crit), default=None),
                       "signed_reading_holding": int(sum(c["signed_holds"] for c in crit)),
                       "clamp_events": pair.clamp_events, "criterion_failed": not all(holds) if crit else False,
                       "inconsistent_clamp_columns": bad_clamps},
        "support_identity_defect": support,
        "fixed_point_change": cert,
        "columns": crit,
    }
    report.analysis = analysis
    if "free_boundary" in cfg.outputs["csv"]:
        out.write("free_boundary.csv", csv_bytes(FREE_BOUNDARY_COLUMNS, profile.rows()))
    out.write("analysis.json", json_bytes(analysis))

    report.check("monotonicity_forward", mono.max_forward_jump <= 0.0, mono.max_forward_jump, 0.0)
    report.check("monotonicity_weak", mono.min_bump_integral >= -MONOTONICITY_TOL, mono.min_bump_integral,
                 -MONOTONICITY_TOL, note=f"{mono.n_bumps} nonnegative bumps")
    report.check("dry_law_formula", dry.formula_mismatch <= cfg.solver["tol_chi"], dry.formula_mismatch,
                 cfg.solver["tol_chi"], note=f"{dry.block_nodes} nodes in the dry blocks")
    report.check("dry_law_branch1", dry.branch1_max_chi == 0.0, dry.branch1_max_chi, 0.0,
                 note="chi on dry nodes of columns that leave off gamma3")
    report.check("support_identity", support <= 1, support, 1)
    report.check("clamp_consistency", not bad_clamps, len(bad_clamps), 0,
                 note="columns with positive margin where a clamp fired")
    report.check("fixed_point_certificate", cert <= cfg.solver["tol_chi"], cert, cfg.solver["tol_chi"])
    report.check("continuity_criterion", all(holds), int(len(holds) - sum(holds)), 0, kind="verdict",
                 note="columns where the criterion fails")
    return profile


def _coarse_sizes(n: int, count: int) -> list[int]:
    sizes = [n]
    for _ in range(count - 1):
        sizes.append((sizes[-1] - 1) // 2 + 1)
    return sorted(set(s for s in sizes if s >= 5))


def _stage_modulus(cfg: RunConfig, pd: ProblemData, fine_profile, report: RunReport, out: _Artifacts):
    count = cfg.analysis["resolutions"]
    sizes_w = _coarse_sizes(cfg.grid["N_w"], count)
    sizes_s = _coarse_sizes(cfg.grid["N_s"], count)
    if len(sizes_w) < 2 or len(sizes_w) != len(sizes_s):
        report.check("continuity_witness", False, None, kind="verdict", note="grid too coarse for a study")
        return
    chart = FlowChart(pd, cfg.flow["h"], cfg.flow["w_range"], cfg.integrator_options())
    profiles = []
    for nw, ns in zip(sizes_w[:-1], sizes_s[:-1]):
        grid = _build_grid(cfg, pd, nw, ns, chart)
        co = coefficients(grid)
        system, pair = _solve(cfg, grid, co)
        profile, _ = _analyze(cfg, pd, grid, system, pair)
        profiles.append(profile)
    profiles.append(fine_profile)
    mod = modulus_report(profiles)
    report.analysis["modulus"] = mod
    out.write("modulus.json", json_bytes(mod))
    report.check("continuity_witness", mod["witness"], mod["max_normalized_jump"], 2.0, kind="verdict",
                 note="normalized jumps stay within a factor 2 across resolutions")


def run(cfg: RunConfig, command: str) -> RunReport:
    """Execute the stages up to ``command`` and write the artifacts and ``report.json``."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; expected one of {list(COMMANDS)}")
    t0 = time.perf_counter()
    report = RunReport(command)
    out_dir = Path(cfg.outputs["directory"])
    out = _Artifacts(out_dir)
    try:
        out.write("config.json", json_bytes(cfg.to_dict()))
        pd = cfg.problem()
        _stage_validate(cfg, pd, report, out)
        if command != "validate":
            grid, co = _stage_flow(cfg, pd, out)
            if command in ("solve", "check-continuity", "all"):
                system, pair = _stage_solve(cfg, grid, co, report, out)
                if command in ("check-continuity", "all"):
                    profile = _stage_analyze(cfg, pd, grid, system, pair, report, out)
                    if command == "all":
                        _stage_modulus(cfg, pd, profile, report, out)
        if report.failed_assertions:
            report.exit_code = EXIT_ANALYSIS
            report.error = f"assertion failure: {report.failed_assertions}"
    except _StageFailure as exc:
        report.exit_code = exc.code
        report.error = str(exc)
    except (ProblemError, ExprError, GeometryError) as exc:
        report.exit_code = EXIT_CONFIG
        report.error = str(exc)
    report.artifacts = dict(out.hashes)
    report.provenance = {"config_hash": cfg.config_hash(), "config_path": cfg.source,
                         "version": __version__, "wall_time_s": time.perf_counter() - t0,
                         "numpy": np.__version__}
    atomic_write(out_dir / "report.json", json_bytes(report.to_dict()))
    return report
