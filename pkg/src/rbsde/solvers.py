"""
Backward schemes for reflected BSDEs in moving convex regions.

All schemes share one explicit step on the backend's state space::

    yhat_k = E_k[Y_{k+1}]
    Z_k    = E_k[Y_{k+1} dW_k] / dt_k
    ytil_k = yhat_k + dt_k f(t_k, yhat_k, Z_k)

followed by a reflection update of ``ytil_k``:

* projection schemes (fixed domain, local, piecewise): ``Y_k = P_D(ytil_k)``;
* penalized scheme: the implicit penalty step
  ``y = ytil - n dt (y - P_D(y))``.

The reflection increment ``Y_k - ytil_k`` is the increment of ``K`` over
``(t_k, t_{k+1}]``. Region jumps at a node ``t_{k+1}`` replace ``Y_{k+1}`` by
its projection on the left-limit set before the step, and the difference is
recorded as the jump of ``K`` at that node.
"""

import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import geometry as geo
from .exceptions import PointOutsideError, ProjectionError
from .region import DiscretizedRegion, jump_size

PENALTY_TOL = 1e-10
PENALTY_MAX_ITER = 10_000
TERMINAL_TOL = 1e-8


# ---------------------------------------------------------------------------
# solution containers
# ---------------------------------------------------------------------------

@dataclass
class SolverReport:
    scheme: str
    parameter: object
    grid: dict
    backend: dict
    wall_time: float
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "scheme": self.scheme, "parameter": self.parameter, "grid": self.grid,
            "backend": self.backend, "wall_time": self.wall_time, "summary": self.summary,
        }


@dataclass(eq=False)
class SolutionEnsemble:
    """Grid values of ``(Y, Z, K)`` on the paths of the backend ensemble.

    ``Y`` and ``Y_left`` have shape ``(P, L+1, m)`` and differ only at jump
    nodes. ``Z`` is ``(P, L, m, d)``. ``Kc_inc[:, k]`` is the reflection
    increment over ``(t_k, t_{k+1}]`` produced at node ``k``; ``Kd_jump[:, k]``
    is the jump of ``K`` at node ``k`` (zero off jump nodes).
    """

    scheme: str
    parameter: object
    times: np.ndarray
    Y: np.ndarray
    Y_left: np.ndarray
    Z: np.ndarray
    Kc_inc: np.ndarray
    Kd_jump: np.ndarray
    jump_nodes: tuple
    drift: np.ndarray
    W: np.ndarray
    dW: np.ndarray
    region: object
    y0_se: float = 0.0
    report: SolverReport = None

    @property
    def P(self):
        return self.Y.shape[0]

    @property
    def N(self):
        return self.Y.shape[1] - 1

    @property
    def m(self):
        return self.Y.shape[2]

    @cached_property
    def dt(self):
        return np.diff(self.times)

    @property
    def xi(self):
        return self.Y[:, -1]

    @property
    def Y0(self):
        return self.Y[:, 0].mean(axis=0)

    @property
    def Z0(self):
        return self.Z[:, 0].mean(axis=0)

    @cached_property
    def dK(self):
        """Total increments of ``K`` over ``(t_k, t_{k+1}]``."""
        return self.Kc_inc + self.Kd_jump[:, 1:]

    @cached_property
    def K(self):
        return _cumulative(self.dK)

    @cached_property
    def Kc(self):
        return _cumulative(self.Kc_inc)

    @cached_property
    def Kd(self):
        return _cumulative(self.Kd_jump[:, 1:])

    @cached_property
    def variation_increments(self):
        return np.linalg.norm(self.Kc_inc, axis=-1) + np.linalg.norm(self.Kd_jump[:, 1:], axis=-1)

    @cached_property
    def K_variation(self):
        """Total variation ``|K|_T`` per path."""
        return self.variation_increments.sum(axis=1)

    def snapshot_sets(self, k):
        return self.region.snapshot(self.times[k], _PathState(self))

    def left_sets(self, k):
        return self.region.left_limit(self.times[k], _PathState(self))


class _PathState:
    """Brownian values of a solution's paths, addressed by node time."""

    def __init__(self, sol):
        self.sol = sol

    def at(self, t):
        k = int(np.argmin(np.abs(self.sol.times - t)))
        if abs(self.sol.times[k] - t) > 1e-9 * max(self.sol.times[-1], 1.0):
            raise ValueError(f"time {t} is not a node of the solution grid")
        return self.sol.W[:, k]


def _cumulative(inc):
    out = np.zeros((inc.shape[0], inc.shape[1] + 1) + inc.shape[2:])
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


# ---------------------------------------------------------------------------
# drivers and the shared step
# ---------------------------------------------------------------------------

@dataclass
class Driver:
    """Driver ``f(t, y, z)`` with declared Lipschitz constants."""

    f: object
    mu: float = 0.0
    lam: float = 0.0
    config: dict = field(default_factory=dict)

    def __call__(self, t, y, z):
        return self.f(t, y, z)


def zero_driver():
    return Driver(lambda t, y, z: np.zeros_like(y), 0.0, 0.0, {"family": "zero"})


def _step(backend, k, ynext, t, dt, driver, extra=None, key=None):
    yhat = clip_to_hull(backend.condexp(ynext, k, extra=extra, key=key), ynext)
    z = backend.condexp_weighted(ynext, k, extra=extra, key=key) / dt
    ytil = yhat + dt * driver(t, yhat, z)
    return ytil, z, yhat


def clip_to_hull(estimates, values):
    """Move estimates of ``E[values | F_k]`` into the convex hull of ``values``.

    A conditional expectation always lies in that hull; polynomial fits do
    not, and their overshoot on tail paths would otherwise leak out of the
    region. The hull is used exactly for m <= 2 and replaced by the bounding
    box of the values for m >= 3.
    """
    lo, hi = values.min(axis=0), values.max(axis=0)
    out = np.clip(estimates, lo, hi)
    if values.shape[1] != 2 or len(values) < 3:
        return out
    try:
        hull = ConvexHull(values)
    except QhullError:
        return out
    eq = hull.equations
    slack = np.abs(eq[:, 2]).max() * 1e-12 + 1e-300
    outside = np.flatnonzero(np.any(out @ eq[:, :2].T + eq[:, 2] > slack, axis=1))
    if outside.size == 0:
        return out
    verts = values[hull.vertices]
    a, b = verts, np.roll(verts, -1, axis=0)
    ab = b - a
    pts = out[outside][:, None, :]
    s = np.clip(np.einsum("pem,em->pe", pts - a, ab) / np.einsum("em,em->e", ab, ab), 0.0, 1.0)
    cand = a + s[..., None] * ab
    best = np.argmin(np.sum((cand - pts) ** 2, axis=-1), axis=1)
    out[outside] = cand[np.arange(len(outside)), best]
    return out


def _penalty_update(g, ytil, c, method):
    if method == "resolvent":
        # the resolvent of y -> y - P(y) is explicit: y sits on the segment
        # [ytil, P(ytil)] and shares its projection
        p = g.project(ytil)
        y = ytil - (c / (1 + c)) * (ytil - p)
        return y, -(c / (1 + c)) * (ytil - p)
    if method != "iteration":
        raise ValueError(f"unknown penalty method {method!r}")
    y = ytil
    for _ in range(PENALTY_MAX_ITER):
        new = (ytil + c * g.project(y)) / (1 + c)
        if np.max(np.abs(new - y)) <= PENALTY_TOL * (1 + np.max(np.abs(new))):
            y = new
            return y, -c * (y - g.project(y))
        y = new
    raise ProjectionError(f"penalty iteration did not reach {PENALTY_TOL} in {PENALTY_MAX_ITER} steps")


def _check_in(g, points, what, tol=TERMINAL_TOL):
    dist = np.atleast_1d(g.distance(points))
    if np.any(dist > tol):
        raise PointOutsideError(f"(H1) {what} lies outside the set (distance {float(dist.max()):.3g})")


# ---------------------------------------------------------------------------
# level-wise recursions
# ---------------------------------------------------------------------------

class _Levels:
    """Per-level fields on the backend state spaces."""

    def __init__(self, k0, k1):
        self.k0, self.k1 = k0, k1
        self.Y = {}
        self.Y_left = {}
        self.Z = {}
        self.Kc = {}
        self.F = {}

    def lift(self, backend, m, d):
        ks = range(self.k0, self.k1 + 1)
        Y = backend.lift([self.Y[k] for k in ks], self.k0)
        Yl = backend.lift([self.Y_left.get(k, self.Y[k]) for k in ks], self.k0)
        if self.k1 > self.k0:
            Z = backend.lift([self.Z[k] for k in ks[:-1]], self.k0)
            Kc = backend.lift([self.Kc[k] for k in ks[:-1]], self.k0)
            F = backend.lift([self.F[k] for k in ks[:-1]], self.k0)
        else:
            Z = np.zeros((Y.shape[0], 0, m, d))
            Kc = F = np.zeros((Y.shape[0], 0, m))
        return Y, Yl, Z, Kc, F


def _local_recursion(levels, frozen, k0, k1, zeta, scenario, grid, backend, extra=None):
    """Projection recursion on ``[t_k0, t_k1]`` with a fixed set ``frozen``."""
    levels.Y[k1] = zeta
    ynext = zeta
    for k in range(k1 - 1, k0 - 1, -1):
        ex = extra if (extra is not None and k > k0) else None
        key = ("frozen", k0) if ex is not None else None
        ytil, z, yhat = _step(backend, k, ynext, grid.times[k], grid.dt[k], scenario.driver, ex, key)
        y = frozen.project(ytil)
        levels.Y[k], levels.Z[k], levels.Kc[k], levels.F[k] = y, z, y - ytil, ytil - yhat
        ynext = y
    return levels.Y[k0]


def _make_solution(scheme, parameter, levels, grid, backend, region, m, d, jump_nodes, wall):
    Y, Yl, Z, Kc, F = levels.lift(backend, m, d)
    ens = backend.path_ensemble
    k0, k1 = levels.k0, levels.k1
    Kd = Yl - Y
    sol = SolutionEnsemble(
        scheme=scheme, parameter=parameter, times=grid.times[k0:k1 + 1].copy(),
        Y=Y, Y_left=Yl, Z=Z, Kc_inc=Kc, Kd_jump=Kd, jump_nodes=tuple(k - k0 for k in jump_nodes), drift=F,
        W=ens.W[:, k0:k1 + 1], dW=ens.dW[:, k0:k1], region=region,
    )
    sol.y0_se = y0_se = _y0_se(sol, backend)
    sol.report = SolverReport(
        scheme=scheme, parameter=parameter,
        grid={"T": grid.T, "N": grid.N, "max_step": grid.max_step},
        backend=backend.describe(), wall_time=wall,
        summary={
            "Y0": sol.Y0.tolist(),
            "Y0_se": y0_se,
            "K_variation_mean": float(sol.K_variation.mean()),
            "K_variation_max": float(sol.K_variation.max()),
        },
    )
    return sol


def _y0_se(sol, backend):
    """Standard error of ``Y_0`` from the pathwise sums ``xi + sum (f dt + dK)``.

    Regression projections keep sample means, so ``Y_0`` is the average of
    these sums; the tree backend is exact and gets 0.
    """
    if backend.describe()["kind"] == "tree" or sol.N == 0 or sol.P < 2:
        return 0.0
    target = sol.Y[:, -1] + sol.drift.sum(axis=1) + sol.dK.sum(axis=1)
    return float(np.max(target.std(axis=0)) / math.sqrt(sol.P))


def _terminal(scenario, grid, backend):
    view = backend.level_view(grid.N)
    g_T = scenario.region.snapshot(grid.T, view)
    xi = scenario.terminal(backend.states(grid.N), g_T)
    return xi, g_T


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------

def solve_local(frozen, k0, k1, zeta, scenario, grid, backend, witness=None, extra=None):
    """Local RBSDE on ``[t_k0, t_k1]`` in the fixed (per path) set ``frozen``.

    ``zeta`` holds terminal values on the state space of level ``k1``. ``K`` is
    re-based so that it vanishes at ``t_k0``.
    """
    if k1 < k0:
        raise ValueError("empty node range")
    _check_in(frozen, zeta, "local terminal value")
    if witness is not None and np.any(np.atleast_1d(frozen.depth(witness)) <= 0):
        raise PointOutsideError("(H4) witness is not interior to the frozen set")
    start = time.perf_counter()
    levels = _Levels(k0, k1)
    _local_recursion(levels, frozen, k0, k1, zeta, scenario, grid, backend, extra)
    return _make_solution("local", (k0, k1), levels, grid, backend, _FixedRegion(frozen, grid.T),
                          scenario.m, scenario.d, (), time.perf_counter() - start)


def solve_fixed_domain(scenario, grid, backend):
    """Projection scheme in a region that does not move."""
    if scenario.region.adapted or scenario.region.jump_times:
        raise ValueError("fixed-domain solver needs a constant region")
    g = scenario.region.snapshot(0.0)
    xi, _ = _terminal(scenario, grid, backend)
    _check_in(g, xi, "terminal value")
    start = time.perf_counter()
    levels = _Levels(0, grid.N)
    _local_recursion(levels, g, 0, grid.N, xi, scenario, grid, backend)
    return _make_solution("fixed", None, levels, grid, backend, scenario.region, scenario.m, scenario.d,
                          (), time.perf_counter() - start)


def solve_piecewise(scenario, disc, grid, backend):
    """Piecewise-constant region scheme glued by projection jumps.

    Segments are solved backward; each uses the parent region frozen at its
    left endpoint, with terminal value the projection of the next segment's
    initial value, and the projection defect is the jump of ``K``.
    """
    if not isinstance(disc, DiscretizedRegion):
        raise TypeError("solve_piecewise expects a DiscretizedRegion")
    nodes = []
    for s in disc.times:
        if not grid.has_node(s):
            raise ValueError(f"grid lacks segment time {s}")
        nodes.append(grid.index_of(s))
    parent = disc.parent
    if parent.adapted and getattr(backend, "kind", "") == "tree":
        raise ValueError("tree backend cannot hold sets frozen at earlier times "
                         "for an adapted region; use the regression backend")
    start = time.perf_counter()
    xi, g_T = _terminal(scenario, grid, backend)
    _check_in(g_T, xi, "terminal value")
    levels = _Levels(0, grid.N)
    ycur = xi
    jump_nodes = []
    for a, b in reversed(list(zip(nodes[:-1], nodes[1:]))):
        frozen = parent.snapshot(grid.times[a], backend.level_view(a))
        zeta = frozen.project(ycur)
        levels.Y_left[b] = zeta
        jump_nodes.append(b)
        extra = backend.path_ensemble.W[:, a] if (parent.adapted and backend.kind == "regression") else None
        y_b = levels.Y.get(b, ycur)
        ycur = _local_recursion(levels, frozen, a, b, zeta, scenario, grid, backend, extra)
        levels.Y[b] = y_b
    levels.Y[grid.N] = xi
    return _make_solution("piecewise", disc.j, levels, grid, backend, disc, scenario.m, scenario.d,
                          sorted(jump_nodes), time.perf_counter() - start)


def solve_penalized(scenario, n, grid, backend, method="resolvent"):
    """Penalization scheme with projection jumps at large region jumps.

    ``method="resolvent"`` uses the explicit resolvent of the penalty step;
    ``method="iteration"`` runs the contraction iteration to ``PENALTY_TOL``.
    Both solve the same implicit equation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    region = scenario.region
    jumps = {}
    for t in region.jump_times:
        if not grid.has_node(t):
            raise ValueError(f"grid lacks region jump time {t}")
        jumps[grid.index_of(t)] = t
    start = time.perf_counter()
    xi, g_T = _terminal(scenario, grid, backend)
    _check_in(g_T, xi, "terminal value")
    levels = _Levels(0, grid.N)
    levels.Y[grid.N] = xi
    ynext = xi
    jump_nodes = []
    for k in range(grid.N - 1, -1, -1):
        if k + 1 in jumps:
            t = jumps[k + 1]
            view = backend.level_view(k + 1)
            mask = np.asarray(jump_size(region, t, view, cap=n)) > 1.0 / n
            if np.any(mask):
                g_left = region.left_limit(t, view)
                proj = g_left.project(ynext)
                if mask.ndim:
                    proj = np.where(mask[:, None], proj, ynext)
                levels.Y_left[k + 1] = proj
                jump_nodes.append(k + 1)
                ynext = proj
        ytil, z, yhat = _step(backend, k, ynext, grid.times[k], grid.dt[k], scenario.driver)
        g = region.snapshot(grid.times[k], backend.level_view(k))
        y, inc = _penalty_update(g, ytil, n * grid.dt[k], method)
        levels.Y[k], levels.Z[k], levels.Kc[k], levels.F[k] = y, z, inc, ytil - yhat
        ynext = y
    return _make_solution("penalized", n, levels, grid, backend, region, scenario.m, scenario.d,
                          sorted(jump_nodes), time.perf_counter() - start)


class _FixedRegion:
    """A constant set seen as a region path (used for local solutions)."""

    adapted = False
    jump_times = ()

    def __init__(self, g, T):
        self.g = g
        self.T = T
        self.m = g.m

    def snapshot(self, t, state=None):
        return self.g

    def left_limit(self, t, state=None):
        return self.g

    def witness(self, t, state=None):
        return self.g.slater

    def witness_left(self, t, state=None):
        return self.g.slater

    def witness_increments(self, ensemble):
        z = np.zeros((ensemble.P, ensemble.grid.N, self.m))
        return z, z


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepEntry:
    parameter: object
    solution: SolutionEnsemble
    distance_to_previous: tuple = None


def convergence_sweep(scenario, scheme, parameters, grid, backend, segment_pick=None):
    """Run ``scheme`` for increasing parameters and measure successive distances."""
    from .region import discretize
    from .verification import solution_distance

    params = list(parameters)
    if params != sorted(params):
        raise ValueError("parameters must be sorted increasing")
    out = []
    for p in params:
        if scheme == "penalized":
            sol = solve_penalized(scenario, p, grid, backend)
        elif scheme == "piecewise":
            state = backend.path_ensemble if scenario.region.adapted else None
            sol = solve_piecewise(scenario, discretize(scenario.region, p, segment_pick, state), grid, backend)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        dist = solution_distance(out[-1].solution, sol) if out else None
        out.append(SweepEntry(p, sol, dist))
    return out


def sweep_decreasing(entries, component=0):
    """Whether successive distances (component 0: Y, 1: Z, 2: K) strictly decrease."""
    d = [e.distance_to_previous[component] for e in entries[1:]]
    return all(b < a for a, b in zip(d, d[1:]))
