"""
Scenario files: parsing, defaults, built-in families and hypothesis checks.

A scenario is a JSON object. Unknown top-level keys are rejected so that a
typo never silently falls back to a default. Every default that gets applied
is written back into :attr:`Scenario.config`, which is what result files echo.

Example::

    {
      "name": "constant-box-1d",
      "T": 1.0, "m": 1, "d": 1,
      "region": {"family": "constant",
                 "set": {"type": "box", "lower": [-0.3], "upper": [0.3]}},
      "driver": {"family": "zero"},
      "terminal": {"family": "clamp", "lower": -0.3, "upper": 0.3},
      "schemes": {"piecewise": [8, 16, 32], "penalized": [32, 64, 128, 256]}
    }
"""

import copy
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import region as reg
from .exceptions import HypothesisError, ScenarioError
from .solvers import Driver
from .stochastic import RegressionBackend, TimeGrid, TreeBackend, generate

DEFAULTS = {
    "T": 1.0,
    "grid": {"steps": 200},
    "ensemble": {"seed": 42, "paths": 10_000},
    "backend": {"kind": "regression", "degree": 3},
    "driver": {"family": "zero"},
    "schemes": {"penalized": [32, 64, 128, 256], "piecewise": [8, 16, 32]},
    "checks": {"containment_constant": 10.0, "skorokhod_count": 10, "skorokhod_seed": 0,
               "reflecting": True},
}
TOP_KEYS = {"name", "description", "T", "m", "d", "region", "driver", "terminal", "grid",
            "ensemble", "backend", "schemes", "checks"}
LIPSCHITZ_PROBES = 2000


# ---------------------------------------------------------------------------
# drivers and terminal values
# ---------------------------------------------------------------------------

def _coords(w, m):
    w = np.atleast_2d(w)
    return w[:, [i % w.shape[1] for i in range(m)]]


def make_driver(cfg, m, d):
    fam = cfg.get("family", "zero")
    if fam == "zero":
        return Driver(lambda t, y, z: np.zeros_like(y), 0.0, 0.0, cfg)
    if fam == "linear":
        # f = a y + b sum_j z[:, :, j] + c
        a, b = float(cfg.get("a", 0.0)), float(cfg.get("b", 0.0))
        c = np.broadcast_to(np.asarray(cfg.get("c", 0.0), dtype=float), (m,))

        def f(t, y, z):
            return a * y + b * z.sum(axis=-1) + c

        return Driver(f, cfg.get("mu", abs(a)), cfg.get("lambda", abs(b) * math.sqrt(d)), cfg)
    if fam == "sine":
        # f = a sin(y) + b tanh(sum_j z[:, :, j]) + c cos(pi t)
        a, b, c = (float(cfg.get(k, 0.0)) for k in ("a", "b", "c"))

        def f(t, y, z):
            return a * np.sin(y) + b * np.tanh(z.sum(axis=-1)) + c * math.cos(math.pi * t)

        return Driver(f, cfg.get("mu", abs(a)), cfg.get("lambda", abs(b) * math.sqrt(d)), cfg)
    raise ScenarioError(f"driver.family: unknown family {fam!r}")


def make_terminal(cfg, m):
    fam = cfg.get("family")
    scale = float(cfg.get("scale", 1.0))
    offset = np.broadcast_to(np.asarray(cfg.get("offset", 0.0), dtype=float), (m,))
    if fam == "constant":
        value = np.broadcast_to(np.asarray(cfg["value"], dtype=float), (m,))
        return lambda w, g: np.broadcast_to(value, (np.atleast_2d(w).shape[0], m)).copy()
    if fam == "linear":
        return lambda w, g: offset + scale * _coords(w, m)
    if fam == "tanh":
        return lambda w, g: offset + scale * np.tanh(_coords(w, m))
    if fam == "sine":
        return lambda w, g: offset + scale * np.sin(_coords(w, m))
    if fam == "clamp":
        lo, hi = float(cfg["lower"]), float(cfg["upper"])
        return lambda w, g: np.clip(offset + scale * _coords(w, m), lo, hi)
    if fam == "projected":
        return lambda w, g: g.project(offset + scale * _coords(w, m))
    raise ScenarioError(f"terminal.family: unknown family {fam!r}")


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def _set(spec, where):
    try:
        return geo.from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: invalid set ({exc})") from exc


def make_region(cfg, T, m):
    fam = cfg.get("family")
    try:
        if fam == "constant":
            g = _set(cfg["set"], "region.set")
            path = reg.constant_region(T, g, cfg.get("witness"), cfg.get("margin"))
        elif fam == "moving_box":
            path = reg.moving_box(T, cfg.get("half_width", 1.0), cfg.get("amplitude", 1.0),
                                  cfg.get("frequency", 1.0), cfg.get("direction", [1.0] * m))
        elif fam == "breathing_ball":
            path = reg.breathing_ball(T, cfg.get("centre", [0.0] * m), cfg.get("radius", 1.0),
                                      cfg.get("amplitude", 0.5), cfg.get("frequency", 1.0))
        elif fam == "rotating_polytope":
            path = reg.rotating_polytope(T, cfg.get("sides", 4), cfg.get("inradius", 1.0),
                                         cfg.get("amplitude", 0.5), cfg.get("frequency", 1.0),
                                         cfg.get("angle0", 0.0), cfg.get("angular_rate", math.pi / 4))
        elif fam == "piecewise":
            pieces = [(float(p["start"]), _set(p["set"], f"region.pieces[{i}].set"))
                      for i, p in enumerate(cfg["pieces"])]
            return reg.piecewise_region(T, pieces, cfg["witness"], float(cfg["margin"]))
        elif fam == "witness_translated":
            path = reg.witness_translated(T, m, cfg.get("base_centre"), cfg.get("scale", 0.3),
                                          cfg.get("shape", "ball"), cfg.get("size", 0.5))
        else:
            raise ScenarioError(f"region.family: unknown family {fam!r}")
    except KeyError as exc:
        raise ScenarioError(f"region.{exc.args[0]}: missing field") from exc
    if fam != "constant" and "witness" in cfg:
        if "margin" not in cfg:
            raise ScenarioError("region.margin: required when a witness is given")
        path = reg.with_witness(path, cfg["witness"], float(cfg["margin"]))
    if path.m != m:
        raise ScenarioError(f"region: family produces sets in R^{path.m}, scenario has m={m}")
    return path


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    name: str
    T: float
    m: int
    d: int
    region: object
    driver: Driver
    terminal: object
    config: dict
    overrides: dict = field(default_factory=dict)
    validation: dict = None

    @property
    def steps(self):
        return int(self.config["grid"]["steps"])

    @property
    def seed(self):
        return int(self.config["ensemble"]["seed"])

    @property
    def paths(self):
        return int(self.config["ensemble"]["paths"])

    @property
    def schemes(self):
        return self.config["schemes"]

    @property
    def checks(self):
        return self.config["checks"]

    def segment_times(self):
        times = set()
        for j in self.schemes.get("piecewise", []):
            times.update(reg.discretize(self.region, int(j)).times)
        return sorted(times)

    def make_grid(self, steps=None):
        """Uniform grid plus exact nodes at region jumps and segment times."""
        include = list(self.region.jump_times) + self.segment_times()
        return TimeGrid.uniform(self.T, steps or self.steps, include=include)

    def make_ensemble(self, grid=None, paths=None, seed=None):
        grid = grid or self.make_grid()
        return generate(self.seed if seed is None else seed, grid, self.d, paths or self.paths)

    def make_backend(self, ensemble):
        cfg = self.config["backend"]
        if cfg["kind"] == "regression":
            return RegressionBackend(ensemble, degree=int(cfg.get("degree", 3)))
        if cfg["kind"] == "tree":
            return TreeBackend(ensemble.grid, self.d, ensemble)
        raise ScenarioError(f"backend.kind: unknown backend {cfg['kind']!r}")

    def with_terminal_shift(self, delta):
        """Copy whose terminal value is shifted by the constant vector ``delta``."""
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (self.m,))
        base = self.terminal
        out = copy.copy(self)
        out.terminal = lambda w, g: base(w, g) + delta
        return out

    def step_warning(self, grid):
        """Message when ``dt * max(mu, lambda^2)`` is too large for the explicit driver."""
        q = grid.max_step * max(self.driver.mu, self.driver.lam**2)
        if q > 0.1:
            return f"dt*max(mu, lambda^2) = {q:.3g} > 0.1; the explicit driver step may be inaccurate"
        return None


def validate_hypotheses(scenario, grid=None, ensemble=None):
    """Run the (H1)-(H4) checks; raise :class:`HypothesisError` on the first failure."""
    grid = grid or scenario.make_grid()
    ensemble = ensemble or scenario.make_ensemble(grid, paths=min(scenario.paths, 2000))
    report = {}

    # (H1) terminal value inside D_T on every sampled path
    g_T = scenario.region.snapshot(scenario.T, ensemble)
    xi = scenario.terminal(ensemble.W[:, -1], g_T)
    dist = np.atleast_1d(g_T.distance(xi))
    if not np.all(np.isfinite(xi)):
        raise HypothesisError("H1", "terminal value is not finite")
    if np.any(dist > 1e-8):
        p = int(np.argmax(dist))
        raise HypothesisError("H1", f"terminal value outside D_T (distance {dist[p]:.3g})",
                              path=p, time=scenario.T)
    report["H1"] = {"max_distance": float(dist.max()), "E_xi2": float(np.mean(np.sum(xi**2, axis=1)))}

    # (H2) f(., 0, 0) square integrable
    ts = grid.times[:-1]
    f0 = np.array([scenario.driver(t, np.zeros((1, scenario.m)), np.zeros((1, scenario.m, scenario.d)))[0]
                   for t in ts])
    integral = float(np.sum(np.sum(f0**2, axis=1) * grid.dt))
    if not np.isfinite(integral):
        raise HypothesisError("H2", "f(t, 0, 0) is not square integrable on the grid")
    report["H2"] = {"int_f0_2": integral}

    # (H3) Lipschitz constants on random probes
    rng = np.random.default_rng(0)
    n, m, d = LIPSCHITZ_PROBES, scenario.m, scenario.d
    t = rng.uniform(0, scenario.T, n)
    y, y2 = rng.normal(scale=2, size=(2, n, m))
    z, z2 = rng.normal(scale=2, size=(2, n, m, d))
    worst = 0.0
    for i in range(0, n, 200):
        sl = slice(i, i + 200)
        tt = float(t[i])
        lhs = np.linalg.norm(scenario.driver(tt, y[sl], z[sl]) - scenario.driver(tt, y2[sl], z2[sl]), axis=1)
        rhs = (scenario.driver.mu * np.linalg.norm(y[sl] - y2[sl], axis=1)
               + scenario.driver.lam * np.linalg.norm((z[sl] - z2[sl]).reshape(len(lhs), -1), axis=1))
        excess = lhs - rhs
        worst = max(worst, float(excess.max()))
    if worst > 1e-8:
        raise HypothesisError("H3", f"driver violates declared Lipschitz constants by {worst:.3g}")
    report["H3"] = {"mu": scenario.driver.mu, "lambda": scenario.driver.lam, "max_excess": worst}

    # (H4) witness, margin, D_T = D_T-, continuity
    h4 = reg.validate_h4(scenario.region, grid, ensemble)
    h4.raise_if_failed()
    report["H4"] = h4.to_dict()
    return report


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def scenario_from_dict(raw, overrides=None, validate=True, source="<dict>"):
    """Build a :class:`Scenario` from a parsed JSON object."""
    if not isinstance(raw, dict):
        raise ScenarioError(f"{source}: top level must be an object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ScenarioError(f"{source}: unknown field(s) {sorted(unknown)}")
    for key in ("name", "m", "d", "region", "terminal"):
        if key not in raw:
            raise ScenarioError(f"{source}: missing field {key!r}")
    cfg = _merge(DEFAULTS, raw)
    if "schemes" in raw:
        cfg["schemes"] = copy.deepcopy(raw["schemes"])
    overrides = dict(overrides or {})
    mapping = {"seed": ("ensemble", "seed"), "paths": ("ensemble", "paths"), "steps": ("grid", "steps")}
    for k, v in overrides.items():
        if v is None:
            continue
        sec, fld = mapping[k]
        cfg[sec][fld] = v
    for sec, fld in mapping.values():
        if int(cfg[sec][fld]) < (0 if fld == "seed" else 1):
            raise ScenarioError(f"{source}: {sec}.{fld} out of range")
    for name, params in cfg["schemes"].items():
        if name not in ("penalized", "piecewise", "fixed"):
            raise ScenarioError(f"{source}: schemes.{name}: unknown scheme")
        if list(params) != sorted(params):
            raise ScenarioError(f"{source}: schemes.{name}: parameters must increase")
    T, m, d = float(cfg["T"]), int(cfg["m"]), int(cfg["d"])
    if T <= 0 or m < 1 or d < 1:
        raise ScenarioError(f"{source}: need T > 0, m >= 1, d >= 1")
    region = make_region(cfg["region"], T, m)
    sc = Scenario(
        name=str(cfg["name"]), T=T, m=m, d=d, region=region,
        driver=make_driver(cfg["driver"], m, d), terminal=make_terminal(cfg["terminal"], m),
        config=cfg, overrides={k: v for k, v in overrides.items() if v is not None},
    )
    if validate:
        sc.validation = validate_hypotheses(sc)
    return sc


def parse_scenario(path, overrides=None, validate=True):
    """Read a scenario file, apply defaults and overrides, validate (H1)-(H4)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(raw, overrides, validate, source=str(path))


def bundled_scenarios():
    """Paths of the scenario files shipped with the package."""
    root = resources.files("rbsde") / "scenarios"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".json"))


def bundled(name):
    for p in bundled_scenarios():
        if p.stem == name:
            return p
    raise KeyError(f"no bundled scenario {name!r}")
