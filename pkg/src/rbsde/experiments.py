"""
Experiment orchestration shared by the command line and the test suite.

A run solves each scheme of a scenario (final parameter for ``run``, every
parameter for ``sweep``), applies the diagnostics and collects everything in
a :class:`RunResult` that serializes to ``result.json``, ``checks.csv`` and
``convergence.csv``.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import verification as ver
from .region import discretize
from .solvers import solve_fixed_domain, solve_penalized, solve_piecewise

SCHEMA_VERSION = "1"
CHECK_COLUMNS = ["schema_version", "scheme", "parameter", "check", "statistic", "threshold",
                 "passed", "worst_path", "worst_time"]
CONVERGENCE_COLUMNS = ["schema_version", "scheme", "parameter", "delta_Y", "delta_Z", "delta_K",
                       "containment", "skorokhod", "rate_delta_Y", "rate_containment"]


def solve(scenario, scheme, parameter, grid, backend):
    if scheme == "penalized":
        return solve_penalized(scenario, int(parameter), grid, backend)
    if scheme == "piecewise":
        state = backend.path_ensemble if scenario.region.adapted else None
        return solve_piecewise(scenario, discretize(scenario.region, int(parameter), state=state), grid, backend)
    if scheme == "fixed":
        return solve_fixed_domain(scenario, grid, backend)
    raise ValueError(f"unknown scheme {scheme!r}")


def diagnose(scenario, sol):
    """All per-solution diagnostics with the scenario's thresholds."""
    cfg = scenario.checks
    rep = ver.DiagnosticReport()
    rep.extend(ver.check_containment(sol, constant=float(cfg["containment_constant"])))
    rep.extend(ver.check_skorokhod(sol, count=int(cfg["skorokhod_count"]), seed=int(cfg["skorokhod_seed"])))
    rep.extend(ver.check_jump_projection(sol))
    rep.extend(ver.check_witness_inequality(sol))
    if sol.scheme != "penalized":
        rep.extend(ver.check_boundary_support(sol))
    rep.extend(ver.check_apriori(sol, scenario))
    residual = ver.check_equation_residual(sol)
    for c in residual.checks:
        c.asserted = False
    rep.extend(residual)
    rep.checks.append(ver.Check("Y0", float(sol.Y0[0]), math.inf, True, asserted=False,
                                details={"Y0": sol.Y0.tolist(), "se": sol.y0_se}))
    rep.checks.append(ver.Check("K_variation_max", float(sol.K_variation.max()), math.inf, True,
                                asserted=False, details={"mean": float(sol.K_variation.mean())}))
    return rep


@dataclass
class RunResult:
    scenario: dict
    overrides: dict
    mode: str
    validation: dict
    solver_reports: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)  # (scheme, parameter, DiagnosticReport)
    convergence: list = field(default_factory=list)  # dict rows with a "scheme" key
    cross_scheme: dict = None
    warnings: list = field(default_factory=list)
    solutions: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self):
        return all(r.passed for _, _, r in self.diagnostics)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "scenario": self.scenario,
            "overrides": self.overrides,
            "validation": self.validation,
            "passed": self.passed,
            "solver_reports": [r.to_dict() for r in self.solver_reports],
            "diagnostics": [{"scheme": s, "parameter": p, **r.to_dict()} for s, p, r in self.diagnostics],
            "convergence": self.convergence,
            "cross_scheme": self.cross_scheme,
            "warnings": self.warnings,
        }


def run(scenario, mode="run", keep_solutions=False):
    """Solve and diagnose a scenario.

    ``run`` uses the final parameter of every scheme, ``sweep`` all of them,
    ``compare`` the final parameters of two schemes plus their distance.
    ``keep_solutions`` is a bool or a collection of ``(scheme, parameter)``
    keys whose ensembles stay in ``result.solutions``.
    """
    grid = scenario.make_grid()
    ensemble = scenario.make_ensemble(grid)
    backend = scenario.make_backend(ensemble)
    result = RunResult(scenario.config, scenario.overrides, mode, scenario.validation or {})
    msg = scenario.step_warning(grid)
    if msg:
        result.warnings.append(msg)
    finals = {}
    for scheme, params in scenario.schemes.items():
        params = list(params) or [None]
        chosen = params if mode == "sweep" else params[-1:]
        prev = None
        entries = []
        for p in chosen:
            sol = solve(scenario, scheme, p, grid, backend)
            result.solver_reports.append(sol.report)
            rep = diagnose(scenario, sol)
            result.diagnostics.append((scheme, p, rep))
            dist = ver.solution_distance(prev, sol) if prev is not None else None
            stats = {"containment": rep["containment"].statistic, "skorokhod": rep["skorokhod"].statistic}
            # the table only needs the statistics, so the ensemble can be released
            entries.append(_Entry(p, None, dist, stats))
            prev = sol
            if keep_solutions is True or (keep_solutions and (scheme, p) in keep_solutions):
                result.solutions[(scheme, p)] = sol
        if mode == "sweep":
            for row in ver.convergence_table(entries, float(scenario.checks["containment_constant"]),
                                             int(scenario.checks["skorokhod_count"])):
                result.convergence.append({"scheme": scheme, **row})
        finals[scheme] = prev
    if mode == "compare":
        if len(finals) < 2:
            raise ValueError("compare needs at least two schemes in the scenario")
        (a, sa), (b, sb) = list(finals.items())[:2]
        dy, dz, dk = ver.solution_distance(sa, sb)
        result.cross_scheme = {"first": f"{a}:{sa.parameter}", "second": f"{b}:{sb.parameter}",
                               "delta_Y": dy, "delta_Z": dz, "delta_K": dk}
        result.convergence.append({"scheme": f"{a}-vs-{b}", "parameter": f"{sa.parameter}/{sb.parameter}",
                                   "delta_Y": dy, "delta_Z": dz, "delta_K": dk,
                                   "containment": math.nan, "skorokhod": math.nan,
                                   "rate_delta_Y": math.nan, "rate_containment": math.nan})
    return result


@dataclass
class _Entry:
    parameter: object
    solution: object
    distance_to_previous: tuple = None
    stats: dict = None


def apriori_ratio(scenario, scheme, parameter, paths):
    """A priori LHS/RHS ratio for ``paths`` paths (same seed and grid)."""
    grid = scenario.make_grid()
    backend = scenario.make_backend(scenario.make_ensemble(grid, paths=paths))
    sol = solve(scenario, scheme, parameter, grid, backend)
    return ver.check_apriori(sol, scenario)["apriori.ratio"].statistic, sol


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def checks_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CHECK_COLUMNS)
    for scheme, param, rep in result.diagnostics:
        for c in rep.checks:
            w.writerow([_fmt(x) for x in (SCHEMA_VERSION, scheme, param, c.name, c.statistic, c.threshold,
                                           c.passed if c.asserted else "report-only",
                                           c.worst_path, c.worst_time)])
    return buf.getvalue()


def convergence_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CONVERGENCE_COLUMNS)
    for row in result.convergence:
        w.writerow([_fmt(SCHEMA_VERSION)] + [_fmt(row.get(c)) for c in CONVERGENCE_COLUMNS[1:]])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    # JSON has no inf/nan; encode them as strings
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and not math.isfinite(float(o)):
        return str(float(o))
    return o


def write_outputs(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(
        json.dumps(_clean(result.to_dict()), indent=2, default=_json_default) + "\n", encoding="utf-8")
    (out / "checks.csv").write_text(checks_csv(result), encoding="utf-8", newline="")
    if result.convergence:
        (out / "convergence.csv").write_text(convergence_csv(result), encoding="utf-8", newline="")
    return out
