"""
Time-dependent convex regions ``t -> D_t`` and their discretizations.

A :class:`RegionPath` is a finite list of pieces ``(start, rule)``; on
``[start_i, start_{i+1})`` the region is ``rule(t, w)`` where ``w`` is the
Brownian value at ``t`` (adapted regions) or ignored (deterministic ones).
Piece starts after the first are the declared jump times. The region carries
a witness process ``A`` staying uniformly inside, together with a declared
margin ``inf_t dist(A_t, boundary D_t) >= margin``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .exceptions import HypothesisError

HAUSDORFF_DIRECTIONS = 512


def _state_at(state, t):
    if state is None:
        raise ValueError("adapted region needs a Brownian state")
    if hasattr(state, "at"):
        return state.at(t)
    return np.asarray(state, dtype=float)


class RegionPath:
    """Cadlag region path with declared jump times and a witness.

    Parameters
    ----------
    T : horizon.
    m : dimension of the sets.
    pieces : list of ``(start, rule)``; the first start must be 0.
    witness : callable ``(t, w) -> A_t``.
    margin : declared lower bound for ``dist(A_t, boundary D_t)``.
    adapted : whether rules and witness read the Brownian state.
    witness_increments : optional callable ``(ensemble) -> (dM, dB)`` giving the
        martingale and drift increments of the witness on the ensemble grid.
    """

    def __init__(self, T, m, pieces, witness, margin, adapted=False,
                 witness_increments=None, name="region", config=None):
        starts = [float(s) for s, _ in pieces]
        if not starts or starts[0] != 0.0 or any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("piece starts must begin at 0 and increase")
        if starts[-1] >= T:
            raise ValueError("jump at T is not supported (D_T must equal D_T-)")
        self.T = float(T)
        self.m = int(m)
        self.pieces = [(float(s), r) for s, r in pieces]
        self._witness = witness
        self.margin = float(margin)
        self.adapted = bool(adapted)
        self._witness_increments = witness_increments
        self.name = name
        self.config = config or {}

    @property
    def jump_times(self):
        return [s for s, _ in self.pieces[1:]]

    def _piece(self, t, left=False):
        idx = 0
        for i, (s, _) in enumerate(self.pieces):
            if s < t or (not left and s == t):
                idx = i
        return self.pieces[idx][1]

    def snapshot(self, t, state=None):
        if not (-1e-12 <= t <= self.T + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        w = _state_at(state, t) if self.adapted else None
        return self._piece(t)(t, w)

    def left_limit(self, t, state=None):
        if not (0 < t <= self.T + 1e-12):
            raise ValueError("left limits are defined on (0, T]")
        w = _state_at(state, t) if self.adapted else None
        return self._piece(t, left=True)(t, w)

    def witness(self, t, state=None):
        w = _state_at(state, t) if self.adapted else None
        return np.asarray(self._witness(t, w), dtype=float)

    def witness_left(self, t, state=None):
        # built-in witnesses are continuous in t
        return self.witness(t, state)

    def witness_increments(self, ensemble):
        """Martingale and drift increments ``(dM, dB)``, each ``(P, N, m)``."""
        if self._witness_increments is not None:
            return self._witness_increments(ensemble)
        grid = ensemble.grid
        vals = np.stack([np.broadcast_to(self.witness(t, ensemble), (ensemble.P, self.m))
                         for t in grid.times], axis=1)
        return np.zeros_like(vals[:, 1:]), np.diff(vals, axis=1)

    def to_dict(self):
        return dict(self.config)

    def __repr__(self):
        return f"RegionPath({self.name!r}, T={self.T}, m={self.m}, jumps={self.jump_times})"


def snapshot(path, t, state=None):
    return path.snapshot(t, state)


def left_limit(path, t, state=None):
    return path.left_limit(t, state)


# ---------------------------------------------------------------------------
# built-in families
# ---------------------------------------------------------------------------

def constant_region(T, g, witness=None, margin=None):
    a = np.asarray(g.slater if witness is None else witness, dtype=float)
    if margin is None:
        margin = float(g.boundary_distance(a))
    return RegionPath(T, g.m, [(0.0, lambda t, w: g)], lambda t, w: a, margin,
                      name="constant", config={"family": "constant", "set": g.to_dict()})


def moving_box(T, half_width=1.0, amplitude=1.0, frequency=1.0, direction=(1.0,)):
    """Box of half-width ``h`` centred at ``amplitude * sin(pi * frequency * t) * direction``."""
    direction = np.asarray(direction, dtype=float)
    m = direction.size
    h = float(half_width)

    def centre(t):
        return amplitude * math.sin(math.pi * frequency * t) * direction

    def rule(t, w):
        c = centre(t)
        return geo.Box(c - h, c + h)

    def increments(ensemble):
        c = np.array([centre(t) for t in ensemble.grid.times])
        db = np.broadcast_to(np.diff(c, axis=0), (ensemble.P,) + (ensemble.grid.N, m))
        return np.zeros_like(db), db

    return RegionPath(T, m, [(0.0, rule)], lambda t, w: centre(t), h,
                      witness_increments=increments, name="moving_box",
                      config={"family": "moving_box", "half_width": h, "amplitude": amplitude,
                              "frequency": frequency, "direction": direction.tolist()})


def breathing_ball(T, centre=(0.0, 0.0), radius=1.0, amplitude=0.5, frequency=1.0):
    """Ball with radius ``radius + amplitude * sin(pi * frequency * t)``."""
    c = np.asarray(centre, dtype=float)
    if abs(amplitude) >= radius:
        raise ValueError("breathing amplitude must be smaller than the radius")

    def r(t):
        return radius + amplitude * math.sin(math.pi * frequency * t)

    ts = np.linspace(0, T, 2001)
    margin = float(min(r(t) for t in ts))
    return RegionPath(T, c.size, [(0.0, lambda t, w: geo.Ball(c, r(t)))], lambda t, w: c, margin,
                      name="breathing_ball",
                      config={"family": "breathing_ball", "centre": c.tolist(), "radius": radius,
                              "amplitude": amplitude, "frequency": frequency})


def rotating_polytope(T, sides=4, inradius=1.0, amplitude=0.5, frequency=1.0,
                      angle0=0.0, angular_rate=math.pi / 4):
    """Regular polygon in the plane, translating along a circle and rotating.

    Centre ``amplitude * (sin(pi f t), 1 - cos(pi f t))``, face normals rotated
    by ``angle0 + angular_rate * t``. The centre is the witness; its distance
    to the boundary is the inradius.
    """
    h = float(inradius)

    def centre(t):
        ph = math.pi * frequency * t
        return amplitude * np.array([math.sin(ph), 1 - math.cos(ph)])

    def rule(t, w):
        th = angle0 + angular_rate * t + 2 * np.pi * np.arange(sides) / sides
        normals = np.column_stack([np.cos(th), np.sin(th)])
        c = centre(t)
        return geo.Polytope(normals, normals @ c + h, slater=c)

    def increments(ensemble):
        c = np.array([centre(t) for t in ensemble.grid.times])
        db = np.broadcast_to(np.diff(c, axis=0), (ensemble.P, ensemble.grid.N, 2))
        return np.zeros_like(db), db

    return RegionPath(T, 2, [(0.0, rule)], lambda t, w: centre(t), h,
                      witness_increments=increments, name="rotating_polytope",
                      config={"family": "rotating_polytope", "sides": sides, "inradius": h,
                              "amplitude": amplitude, "frequency": frequency,
                              "angle0": angle0, "angular_rate": angular_rate})


def piecewise_region(T, pieces, witness, margin):
    """Constant sets with jumps: ``pieces`` is a list of ``(start, ConvexSet)``."""
    a = np.asarray(witness, dtype=float)
    rules = [(s, (lambda g: (lambda t, w: g))(g)) for s, g in pieces]
    m = pieces[0][1].m
    return RegionPath(T, m, rules, lambda t, w: a, margin, name="piecewise",
                      config={"family": "piecewise",
                              "pieces": [{"start": s, "set": g.to_dict()} for s, g in pieces],
                              "witness": a.tolist(), "margin": margin})


def witness_translated(T, m, base_centre=None, scale=0.3, shape="ball", size=0.5):
    """Adapted region ``A_t + G`` with ``A_t^i = c_i + scale * sin(W_t^{i mod d})``.

    ``G`` is a centred ball of radius ``size`` or a box of half-width ``size``.
    Ito's formula splits ``dA = scale cos(W) dW - scale/2 sin(W) dt``.
    """
    c0 = np.zeros(m) if base_centre is None else np.asarray(base_centre, dtype=float)

    def coords(w):
        w = np.atleast_2d(w)
        return w[:, [i % w.shape[1] for i in range(m)]]

    def witness(t, w):
        return c0 + scale * np.sin(coords(w))

    def rule(t, w):
        a = witness(t, w)
        if shape == "ball":
            return geo.Ball(a, np.full(a.shape[0], size))
        return geo.Box(a - size, a + size)

    def increments(ensemble):
        idx = [i % ensemble.d for i in range(m)]
        w = ensemble.W[:, :-1][..., idx]
        dw = ensemble.dW[..., idx]
        dm = scale * np.cos(w) * dw
        db = -0.5 * scale * np.sin(w) * ensemble.grid.dt[None, :, None]
        return dm, db

    return RegionPath(T, m, [(0.0, rule)], witness, size, adapted=True,
                      witness_increments=increments, name="witness_translated",
                      config={"family": "witness_translated", "m": m, "base_centre": c0.tolist(),
                              "scale": scale, "shape": shape, "size": size})


def with_witness(path, point, margin):
    """Copy of ``path`` with a constant witness ``point`` and declared ``margin``."""
    a = np.asarray(point, dtype=float)
    cfg = dict(path.config, witness=a.tolist(), margin=margin)
    return RegionPath(path.T, path.m, path.pieces, lambda t, w: a, margin,
                      adapted=path.adapted, name=path.name, config=cfg)


# ---------------------------------------------------------------------------
# jumps, discretization, validation
# ---------------------------------------------------------------------------

def _capped(g, n):
    if g.bounding_radius() <= n:
        return g
    return geo.Intersection([g, geo.Ball(np.zeros(g.m), float(n))])


def jump_size(path, t, state=None, cap=None, directions=HAUSDORFF_DIRECTIONS):
    """``rho(D_t, D_t-)`` (optionally after intersecting with ``B(0, cap)``)."""
    g, g_left = path.snapshot(t, state), path.left_limit(t, state)
    if cap is not None:
        g, g_left = _capped(g, cap), _capped(g_left, cap)
    return geo.hausdorff(g, g_left, directions)


def penalization_jump_times(path, n, state=None):
    """Declared jumps whose capped Hausdorff size exceeds ``1/n``.

    For adapted regions a time is kept if the criterion holds on any path;
    :func:`penalization_jump_masks` gives the per-path selection.
    """
    return sorted(penalization_jump_masks(path, n, state))


def penalization_jump_masks(path, n, state=None):
    if n < 1:
        raise ValueError("n must be >= 1")
    out = {}
    for t in path.jump_times:
        size = np.asarray(jump_size(path, t, state, cap=n))
        mask = size > 1.0 / n
        if np.any(mask):
            out[t] = mask
    return out


@dataclass(frozen=True, eq=False)
class DiscretizedRegion:
    """Piecewise-constant region frozen at segment left endpoints.

    ``times`` are ``sigma_0 = 0 < ... < sigma_{k+1} = T``. On
    ``[sigma_{i-1}, sigma_i)`` the set is the parent's snapshot at
    ``sigma_{i-1}``; at ``T`` it is the parent's ``D_T``, so a projection
    jump of the terminal value can occur at ``T``.
    """

    parent: RegionPath
    times: tuple
    j: int = 0
    picks: tuple = field(default=())

    @property
    def T(self):
        return self.parent.T

    @property
    def m(self):
        return self.parent.m

    @property
    def adapted(self):
        return self.parent.adapted

    @property
    def margin(self):
        return self.parent.margin

    @property
    def jump_times(self):
        return list(self.times[1:])

    def segment_start(self, t, left=False):
        starts = self.times[:-1]
        i = int(np.searchsorted(starts, t, side="left" if left else "right")) - 1
        return starts[max(i, 0)]

    def snapshot(self, t, state=None):
        if t >= self.T - 1e-12:
            return self.parent.snapshot(self.T, state)
        return self.parent.snapshot(self.segment_start(t), state)

    def left_limit(self, t, state=None):
        return self.parent.snapshot(self.segment_start(t, left=True), state)

    def witness(self, t, state=None):
        if t >= self.T - 1e-12:
            return self.parent.witness(self.T, state)
        return self.parent.witness(self.segment_start(t), state)

    def witness_left(self, t, state=None):
        return self.parent.witness(self.segment_start(t, left=True), state)

    def witness_increments(self, ensemble):
        vals = np.stack([np.broadcast_to(self.witness(t, ensemble), (ensemble.P, self.m))
                         for t in ensemble.grid.times], axis=1)
        return np.zeros_like(vals[:, 1:]), np.diff(vals, axis=1)


def discretize(path, j, segment_pick=None, state=None):
    """Piecewise-constant discretization with mesh in ``[1/j, 2/j]``.

    ``segment_pick(i)`` returns the step ``a_i`` of segment ``i`` (default
    ``1/j``). Declared jumps larger than ``1/j`` always become segment times.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    big_jumps = [t for t in path.jump_times
                 if np.any(np.asarray(jump_size(path, t, state)) > 1.0 / j)]
    times, picks = [0.0], []
    i = 1
    while times[-1] < path.T:
        a = 1.0 / j if segment_pick is None else float(segment_pick(i))
        if not (1.0 / j - 1e-15 <= a <= 2.0 / j + 1e-15):
            raise ValueError(f"segment pick {a} outside [1/j, 2/j]")
        prev = times[-1]
        nxt = min([prev + a] + [t for t in big_jumps if t > prev] + [path.T])
        if path.T - nxt < 1e-12 * path.T:
            nxt = path.T
        times.append(nxt)
        picks.append(a)
        i += 1
    return DiscretizedRegion(path, tuple(times), j, tuple(picks))


def uniform_gap(path, disc, grid, state=None, directions=HAUSDORFF_DIRECTIONS):
    """``max_k rho(D^j_{t_k}, D_{t_k})`` over grid nodes (and paths)."""
    for s in disc.times:
        if not grid.has_node(s):
            raise ValueError(f"grid lacks segment time {s}")
    gap = 0.0
    for t in grid.times:
        d = geo.hausdorff(disc.snapshot(t, state), path.snapshot(t, state), directions)
        gap = max(gap, float(np.max(d)))
    return gap


@dataclass
class H4Report:
    passed: bool
    margin_min: float
    declared_margin: float
    terminal_jump: float
    h2_norm: float
    continuity_ok: bool
    first_violation: dict = None
    messages: list = field(default_factory=list)

    def raise_if_failed(self):
        if not self.passed:
            v = self.first_violation or {}
            raise HypothesisError("H4", "; ".join(self.messages), path=v.get("path"), time=v.get("time"))

    def to_dict(self):
        return {
            "passed": self.passed, "margin_min": self.margin_min,
            "declared_margin": self.declared_margin, "terminal_jump": self.terminal_jump,
            "h2_norm": self.h2_norm, "continuity_ok": self.continuity_ok,
            "first_violation": self.first_violation, "messages": list(self.messages),
        }


def _max_step_rho(path, times, state):
    worst, where = 0.0, None
    jumps = path.jump_times
    for a, b in zip(times[:-1], times[1:]):
        if any(a < s <= b for s in jumps):
            continue
        r = float(np.max(geo.hausdorff(path.snapshot(a, state), path.snapshot(b, state),
                                       HAUSDORFF_DIRECTIONS)))
        if r > worst:
            worst, where = r, b
    return worst, where


def validate_h4(path, grid, ensemble=None, tol=1e-10):
    """Check witness containment, margin, ``D_T = D_T-`` and continuity.

    The witness ``H^2`` norm is estimated from its declared martingale/drift
    split. Continuity between declared jumps is checked (deterministic
    regions) by comparing the largest one-step Hausdorff move on the grid
    with the same quantity on a four-times finer grid.
    """
    state = ensemble
    if path.adapted and state is None:
        raise ValueError("adapted region needs an ensemble for validation")
    messages, first = [], None
    margin_min = math.inf

    def record(kind, t, dist_or_margin, paths_bad):
        nonlocal first
        p = int(np.flatnonzero(np.atleast_1d(paths_bad))[0]) if np.ndim(paths_bad) else None
        if first is None or t < first["time"]:
            first = {"kind": kind, "time": float(t), "path": p, "value": float(dist_or_margin)}

    checkpoints = [(t, False) for t in grid.times] + [(t, True) for t in path.jump_times]
    for t, left in checkpoints:
        g = path.left_limit(t, state) if left else path.snapshot(t, state)
        a = path.witness_left(t, state) if left else path.witness(t, state)
        dist = np.atleast_1d(g.distance(a))
        bad = dist > tol
        if np.any(bad):
            record("containment", t, float(dist.max()), bad)
            continue
        depth = np.atleast_1d(np.maximum(g.depth(a), 0.0))
        margin_min = min(margin_min, float(depth.min()))
        bad = depth < path.margin * (1 - 1e-6)
        if np.any(bad):
            record("margin", t, float(depth.min()), bad)
    if first is not None:
        if first["kind"] == "containment":
            messages.append(f"witness leaves the region (distance {first['value']:.3g})")
        else:
            messages.append(f"witness margin {first['value']:.3g} below declared {path.margin:.3g}")

    terminal_jump = float(np.max(geo.hausdorff(path.snapshot(path.T, state),
                                               path.left_limit(path.T, state), HAUSDORFF_DIRECTIONS)))
    if terminal_jump > 1e-12:
        messages.append("D_T differs from D_T-")

    continuity_ok = True
    if not path.adapted:
        coarse, _ = _max_step_rho(path, grid.times, None)
        fine_times = np.unique(np.concatenate([np.linspace(a, b, 5) for a, b in
                                               zip(grid.times[:-1], grid.times[1:])]))
        fine, where = _max_step_rho(path, fine_times, None)
        if coarse > 1e-12 and fine > 0.5 * coarse + 1e-9:
            continuity_ok = False
            messages.append(f"undeclared discontinuity near t={where:.6g}")

    h2 = math.nan
    if ensemble is not None:
        from .stochastic import h2_norm_estimate

        dm, db = path.witness_increments(ensemble)
        h2 = h2_norm_estimate(dm, db)

    passed = first is None and terminal_jump <= 1e-12 and continuity_ok
    return H4Report(passed, margin_min, path.margin, terminal_jump, h2, continuity_ok, first, messages)
