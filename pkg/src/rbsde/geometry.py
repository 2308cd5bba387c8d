"""
Closed convex sets with nonempty interior.

Four variants are provided: :class:`Ball`, :class:`Box`, :class:`Polytope`
(intersection of halfspaces ``a_i . x <= b_i``) and :class:`Intersection`.
Every set stores an interior (Slater) point that is validated on construction.

Sets may be *batched*: parameters carry leading batch dimensions so that one
object represents a different set for each simulated path. Points have shape
``(..., m)`` and broadcast against the batch shape.

Module-level functions mirror the methods (``project(set, x)`` and so on)
and add the Hausdorff metric computed through support functions.
"""

import functools
import itertools
import math
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

from .exceptions import PointOutsideError, ProjectionError, UnboundedError

DYKSTRA_TOL = 1e-10
DYKSTRA_FEAS_TOL = 1e-12
DYKSTRA_MAX_ITER = 10_000


def _as_points(x, m):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != m:
        raise ValueError(f"points must have trailing dimension {m}, got shape {x.shape}")
    return x


class ConvexSet:
    """Common interface of all set variants."""

    m: int

    # -- to be provided by variants -------------------------------------
    def project(self, x):
        raise NotImplementedError

    def depth(self, x):
        """Signed depth: equals dist(x, boundary) inside, is <= 0 outside."""
        raise NotImplementedError

    def support(self, u):
        raise NotImplementedError

    @property
    def slater(self):
        raise NotImplementedError

    @property
    def batch_shape(self):
        raise NotImplementedError

    @property
    def is_bounded(self):
        return True

    def halfspaces(self):
        """Return ``(normals, offsets)`` for polyhedral sets, else ``None``."""
        return None

    # -- shared ------------------------------------------------------------
    def distance(self, x):
        x = _as_points(x, self.m)
        return np.linalg.norm(x - self.project(x), axis=-1)

    def contains(self, x, tol=0.0):
        return self.distance(x) <= tol

    def boundary_distance(self, a):
        a = _as_points(a, self.m)
        dist = self.distance(a)
        if np.any(dist > 1e-12):
            raise PointOutsideError(
                f"point lies outside the set (distance {float(np.max(dist)):.3g})"
            )
        return np.maximum(self.depth(a), 0.0)

    def _validate_slater(self):
        d = self.depth(self.slater)
        if np.any(~(d > 0)):
            raise ValueError(
                f"{type(self).__name__}: Slater point is not interior "
                f"(depth {float(np.min(d)):.3g}); set has empty interior"
            )

    def bounding_radius(self):
        """Radius of a ball about the origin containing the set (batch max)."""
        if not self.is_bounded:
            raise UnboundedError(f"{type(self).__name__} is unbounded")
        eye = np.vstack([np.eye(self.m), -np.eye(self.m)])
        h = np.asarray(self.support(eye))
        corner = np.maximum(h[..., : self.m], h[..., self.m:])
        return float(np.max(np.linalg.norm(corner, axis=-1)))

    def diameter_bound(self):
        """Upper bound for the diameter: length of the bounding-box diagonal."""
        eye = np.vstack([np.eye(self.m), -np.eye(self.m)])
        h = np.asarray(self.support(eye))
        widths = h[..., : self.m] + h[..., self.m:]
        return float(np.max(np.linalg.norm(widths, axis=-1)))

    def to_dict(self):
        raise NotImplementedError


class Ball(ConvexSet):
    """Closed Euclidean ball ``{x : |x - center| <= radius}``."""

    def __init__(self, center, radius):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = np.asarray(radius, dtype=float)
        self.m = self.center.shape[-1]
        if np.any(~(self.radius > 0)):
            raise ValueError("Ball radius must be positive")
        self._validate_slater()

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.center.shape[:-1], self.radius.shape)

    @property
    def slater(self):
        return self.center

    def project(self, x):
        x = _as_points(x, self.m)
        diff = x - self.center
        nd = np.linalg.norm(diff, axis=-1)
        r = self.radius
        outside = nd > r
        scale = np.where(outside, r / np.where(outside, nd, 1.0), 1.0)
        return np.where(outside[..., None], self.center + diff * scale[..., None], x)

    def distance(self, x):
        x = _as_points(x, self.m)
        return np.maximum(np.linalg.norm(x - self.center, axis=-1) - self.radius, 0.0)

    def depth(self, x):
        x = _as_points(x, self.m)
        return self.radius - np.linalg.norm(x - self.center, axis=-1)

    def support(self, u):
        u = np.asarray(u, dtype=float)
        return np.tensordot(self.center, u, axes=([-1], [-1])) + _expand(self.radius, u.ndim - 1)

    def to_dict(self):
        return {"type": "ball", "center": self.center.tolist(), "radius": float(self.radius)}

    def __repr__(self):
        return f"Ball(center={self.center.tolist()}, radius={self.radius.tolist()})"


class Box(ConvexSet):
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        self.m = self.lower.shape[-1]
        if np.any(~(self.lower < self.upper)):
            raise ValueError("Box requires lower < upper componentwise")
        self._validate_slater()

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.lower.shape[:-1], self.upper.shape[:-1])

    @property
    def slater(self):
        return 0.5 * (self.lower + self.upper)

    def project(self, x):
        x = _as_points(x, self.m)
        return np.clip(x, self.lower, self.upper)

    def distance(self, x):
        x = _as_points(x, self.m)
        return np.linalg.norm(x - np.clip(x, self.lower, self.upper), axis=-1)

    def depth(self, x):
        x = _as_points(x, self.m)
        return np.minimum(x - self.lower, self.upper - x).min(axis=-1)

    def support(self, u):
        u = np.asarray(u, dtype=float)
        k = u.ndim - 1
        lo = _expand_points(self.lower, k)
        hi = _expand_points(self.upper, k)
        return np.maximum(lo * u, hi * u).sum(axis=-1)

    def halfspaces(self):
        eye = np.eye(self.m)
        normals = np.vstack([eye, -eye])
        offsets = np.concatenate(_broadcast_offsets([self.upper, -self.lower]), axis=-1)
        return normals, offsets

    def to_dict(self):
        return {"type": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    def __repr__(self):
        return f"Box(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


class Polytope(ConvexSet):
    """Intersection of halfspaces ``normals[i] . x <= offsets[..., i]``.

    Normals are shared by the whole batch; offsets may be batched. Rows are
    rescaled to unit normals on construction. When ``slater`` is omitted the
    Chebyshev centre is computed by linear programming (unbatched only).
    """

    def __init__(self, normals, offsets, slater=None):
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        offsets = np.asarray(offsets, dtype=float)
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0):
            raise ValueError("Polytope normals must be nonzero")
        self.normals = normals / norms[:, None]
        self.offsets = offsets / norms
        self.m = self.normals.shape[1]
        if slater is None:
            if self.offsets.ndim != 1:
                raise ValueError("batched Polytope needs an explicit Slater point")
            slater = _chebyshev_centre(self.normals, self.offsets)
        self._slater = np.asarray(slater, dtype=float)
        self._validate_slater()

    @property
    def batch_shape(self):
        return np.broadcast_shapes(self.offsets.shape[:-1], self._slater.shape[:-1])

    @property
    def slater(self):
        return self._slater

    def halfspaces(self):
        return self.normals, self.offsets

    @cached_property
    def is_bounded(self):
        return _recession_cone_trivial_cached(self.normals.shape, self.normals.tobytes())

    def depth(self, x):
        x = _as_points(x, self.m)
        return (self.offsets - x @ self.normals.T).min(axis=-1)

    def project(self, x):
        x = _as_points(x, self.m)
        return _project_primitives(x, self.normals, self.offsets, [], [])

    def support(self, u):
        if not self.is_bounded:
            raise UnboundedError("Polytope is unbounded")
        u = np.asarray(u, dtype=float)
        if self.m <= 3:
            return _support_by_vertices(self.normals, self.offsets, u)
        return _support_by_linprog(self.normals, self.offsets, u)

    def to_dict(self):
        return {
            "type": "polytope",
            "normals": self.normals.tolist(),
            "offsets": self.offsets.tolist(),
            "slater": self._slater.tolist(),
        }

    def __repr__(self):
        return f"Polytope(k={len(self.normals)}, m={self.m})"


class Intersection(ConvexSet):
    """Intersection of member sets.

    Projection uses Dykstra's algorithm over the members. Support values are
    exact when every member is polyhedral, and exact for curved members in
    the plane (maximum over boundary vertices and circle support points).
    In higher dimensions with curved members they are computed numerically
    by SLSQP over the primitive constraints.
    """

    def __init__(self, members, slater=None):
        self.members = list(members)
        if not self.members:
            raise ValueError("Intersection needs at least one member")
        self.m = self.members[0].m
        if any(g.m != self.m for g in self.members):
            raise ValueError("Intersection members must share the dimension")
        self._slater = np.asarray(slater if slater is not None else self._find_slater(), dtype=float)
        self._validate_slater()

    def _find_slater(self):
        candidates = [np.asarray(g.slater, dtype=float) for g in self.members]
        candidates.append(np.mean(np.broadcast_arrays(*candidates), axis=0))
        best, best_depth = None, -np.inf
        for c in candidates:
            d = np.min(self.depth(c))
            if d > best_depth:
                best, best_depth = c, d
        if best_depth > 0:
            return best
        if best.ndim != 1:
            raise ValueError("batched Intersection needs an explicit Slater point")
        from scipy.optimize import minimize

        res = minimize(lambda z: -float(self.depth(z)), best, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        return res.x

    @property
    def batch_shape(self):
        shapes = [g.batch_shape for g in self.members] + [self._slater.shape[:-1]]
        return np.broadcast_shapes(*shapes)

    @property
    def slater(self):
        return self._slater

    @property
    def is_bounded(self):
        return any(g.is_bounded for g in self.members)

    def halfspaces(self):
        parts = [g.halfspaces() for g in self.members]
        if any(p is None for p in parts):
            return None
        normals = np.vstack([p[0] for p in parts])
        offsets = np.concatenate(_broadcast_offsets([p[1] for p in parts]), axis=-1)
        return normals, offsets

    def as_polytope(self):
        hs = self.halfspaces()
        if hs is None:
            return None
        return Polytope(hs[0], hs[1], slater=self._slater)

    def depth(self, x):
        return np.min(np.stack(np.broadcast_arrays(*[g.depth(x) for g in self.members])), axis=0)

    def project(self, x):
        x = _as_points(x, self.m)
        if len(self.members) == 1:
            return self.members[0].project(x)
        shape = np.broadcast_shapes(x.shape, self.batch_shape + (self.m,))
        y = np.array(np.broadcast_to(x, shape))
        pending = self.depth(y) < 0
        # most points are settled by the projection onto a single member
        for i, g in enumerate(self.members):
            if not np.any(pending):
                return y
            p = np.broadcast_to(g.project(x), shape)
            ok = pending.copy()
            for h in self.members[:i] + self.members[i + 1:]:
                ok &= h.depth(p) >= 0
            y[ok] = p[ok]
            pending &= ~ok
        if not np.any(pending):
            return y
        normals, offsets, centres, radii = _batched_primitives(self)
        # the answer now has active constraints from at least two members
        owner = np.concatenate([np.full(len(_batched_primitives(g)[0]), i)
                                for i, g in enumerate(self.members)]
                               + [np.full(len(_batched_primitives(g)[2]), i)
                                  for i, g in enumerate(self.members)])
        exact = _project_primitives(x, normals, offsets, centres, radii, fallback=self._dykstra,
                                    mask=np.broadcast_to(pending, shape[:-1]), owner=owner)
        y[pending] = exact[pending]
        return y

    def _dykstra(self, x):
        """Dykstra's algorithm over the members for points of shape ``batch + (m,)``."""
        y = x.copy()
        incr = [np.zeros_like(y) for _ in self.members]
        scale = 1 + self.diameter_bound()
        for _ in range(DYKSTRA_MAX_ITER):
            prev = y
            for i, g in enumerate(self.members):
                z = y + incr[i]
                y = np.broadcast_to(g.project(z), z.shape)
                incr[i] = z - y
            move = np.max(np.abs(y - prev))
            feas = max(float(np.max(g.distance(y))) for g in self.members)
            if move <= DYKSTRA_TOL * (1 + float(np.max(np.abs(y)))) and feas <= DYKSTRA_FEAS_TOL * scale:
                return y
        raise ProjectionError("Dykstra projection onto Intersection did not converge")

    def support(self, u):
        if not self.is_bounded:
            raise UnboundedError("Intersection has no bounded member")
        poly = self.as_polytope()
        if poly is not None:
            return poly.support(u)
        u = np.asarray(u, dtype=float)
        if self.batch_shape:
            flat = [_index_set(self, i) for i in np.ndindex(*self.batch_shape)]
            vals = np.stack([g.support(u) for g in flat])
            return vals.reshape(self.batch_shape + vals.shape[1:])
        halfspaces, circles = _primitives(self)
        if self.m <= 2:
            return _support_candidates_2d(self, halfspaces, circles, u)
        return _support_slsqp(self, halfspaces, circles, u)

    def to_dict(self):
        return {"type": "intersection", "members": [g.to_dict() for g in self.members],
                "slater": self._slater.tolist()}

    def __repr__(self):
        return f"Intersection({self.members!r})"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _broadcast_offsets(offsets):
    batch = np.broadcast_shapes(*[o.shape[:-1] for o in offsets])
    return [np.broadcast_to(o, batch + o.shape[-1:]) for o in offsets]


def _expand(arr, k):
    """Append ``k`` singleton axes to a batched scalar parameter."""
    arr = np.asarray(arr)
    return arr.reshape(arr.shape + (1,) * k)


def _expand_points(arr, k):
    """Insert ``k`` singleton axes before the trailing coordinate axis."""
    arr = np.asarray(arr)
    return arr.reshape(arr.shape[:-1] + (1,) * k + arr.shape[-1:])


def _expand_set(g, k):
    if k == 0:
        return g
    if isinstance(g, Ball):
        return Ball(_expand_points(g.center, k), _expand(g.radius, k))
    if isinstance(g, Box):
        return Box(_expand_points(g.lower, k), _expand_points(g.upper, k))
    if isinstance(g, Polytope):
        return Polytope(g.normals, _expand_points(g.offsets, k), slater=_expand_points(g.slater, k))
    if isinstance(g, Intersection):
        return Intersection([_expand_set(h, k) for h in g.members], slater=_expand_points(g.slater, k))
    raise TypeError(type(g))


def _index_set(g, idx):
    """Unbatched member ``idx`` of a batched set."""
    def pick(arr, trailing):
        arr = np.asarray(arr)
        b = arr.ndim - trailing
        if b == 0:
            return arr
        sub = tuple(i if s > 1 else 0 for i, s in zip(idx[-b:], arr.shape[:b]))
        return arr[sub]
    if isinstance(g, Ball):
        return Ball(pick(g.center, 1), pick(g.radius, 0))
    if isinstance(g, Box):
        return Box(pick(g.lower, 1), pick(g.upper, 1))
    if isinstance(g, Polytope):
        return Polytope(g.normals, pick(g.offsets, 1), slater=pick(g.slater, 1))
    if isinstance(g, Intersection):
        return Intersection([_index_set(h, idx) for h in g.members], slater=pick(g.slater, 1))
    raise TypeError(type(g))


def _primitives(g):
    """Flatten an unbatched set into halfspaces ``(n, b)`` and circles ``(c, r)``."""
    if isinstance(g, Ball):
        return [], [(g.center, float(g.radius))]
    if isinstance(g, Intersection):
        hs, cs = [], []
        for h in g.members:
            a, b = _primitives(h)
            hs += a
            cs += b
        return hs, cs
    normals, offsets = g.halfspaces()
    return [(n, float(b)) for n, b in zip(normals, offsets)], []


def _support_candidates_2d(g, halfspaces, circles, u):
    pts = []
    if g.m == 1:
        for n, b in halfspaces:
            pts.append(np.array([b / n[0]]))
        for c, r in circles:
            pts += [c + r, c - r]
    else:
        for (n1, b1), (n2, b2) in itertools.combinations(halfspaces, 2):
            mat = np.vstack([n1, n2])
            if abs(np.linalg.det(mat)) > 1e-12:
                pts.append(np.linalg.solve(mat, [b1, b2]))
        for n, b in halfspaces:
            for c, r in circles:
                # line n.x = b meets circle |x - c| = r
                foot = c + (b - n @ c) * n
                h2 = r * r - float(np.sum((foot - c) ** 2))
                if h2 >= 0:
                    tang = np.array([-n[1], n[0]])
                    pts += [foot + math.sqrt(h2) * tang, foot - math.sqrt(h2) * tang]
        for (c1, r1), (c2, r2) in itertools.combinations(circles, 2):
            dvec = c2 - c1
            d = float(np.linalg.norm(dvec))
            if d == 0 or d > r1 + r2 or d < abs(r1 - r2):
                continue
            a = (r1 * r1 - r2 * r2 + d * d) / (2 * d)
            h = math.sqrt(max(r1 * r1 - a * a, 0.0))
            mid = c1 + a * dvec / d
            perp = np.array([-dvec[1], dvec[0]]) / d
            pts += [mid + h * perp, mid - h * perp]
    fixed = np.array(pts).reshape(-1, g.m)
    scale = 1.0 + max(float(np.abs(c).max()) + r for c, r in circles)
    u2 = np.atleast_2d(u)
    best = np.full(u2.shape[0], -np.inf)
    if len(fixed):
        ok = g.depth(fixed) >= -1e-9 * scale
        if np.any(ok):
            best = (fixed[ok] @ u2.T).max(axis=0)
    for c, r in circles:
        cand = c + r * u2
        ok = g.depth(cand) >= -1e-9 * scale
        vals = np.where(ok, np.sum(cand * u2, axis=1), -np.inf)
        best = np.maximum(best, vals)
    return best if u.ndim > 1 else best[0]


def _support_slsqp(g, halfspaces, circles, u):
    from scipy.optimize import minimize

    cons = [{"type": "ineq", "fun": (lambda x, n=n, b=b: b - n @ x), "jac": (lambda x, n=n: -n)}
            for n, b in halfspaces]
    cons += [{"type": "ineq", "fun": (lambda x, c=c, r=r: r * r - np.sum((x - c) ** 2)),
              "jac": (lambda x, c=c: -2 * (x - c))} for c, r in circles]
    u2 = np.atleast_2d(u)
    out = np.empty(u2.shape[0])
    for i, d in enumerate(u2):
        res = minimize(lambda x: -(d @ x), g.slater, jac=lambda x: -d, constraints=cons,
                       method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
        out[i] = d @ res.x
    return out if u.ndim > 1 else out[0]


def _chebyshev_centre(normals, offsets):
    k, m = normals.shape
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_ub = np.hstack([normals, np.ones((k, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=offsets, bounds=[(None, None)] * m + [(None, 1e6)],
                  method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        raise ValueError("Polytope has empty interior")
    return res.x[:m]


@functools.lru_cache(maxsize=4096)
def _recession_cone_trivial_cached(shape, raw):
    # boundedness depends on the normals only, which rarely change along a path
    return _recession_cone_trivial(np.frombuffer(raw).reshape(shape))


def _recession_cone_trivial(normals):
    m = normals.shape[1]
    if m == 1:
        return bool(np.any(normals[:, 0] > 0) and np.any(normals[:, 0] < 0))
    if m == 2:
        # bounded iff consecutive normal angles leave no gap of pi or more
        ang = np.sort(np.arctan2(normals[:, 1], normals[:, 0]))
        gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * np.pi]))
        return bool(gaps.max() < np.pi - 1e-12)
    for i in range(m):
        for sign in (1.0, -1.0):
            c = np.zeros(m)
            c[i] = -sign
            res = linprog(c, A_ub=normals, b_ub=np.zeros(len(normals)),
                          bounds=[(-1, 1)] * m, method="highs")
            if res.status == 0 and -res.fun > 1e-12:
                return False
    return True


def _batched_primitives(g):
    """Halfspaces ``(normals, offsets)`` and balls ``(centres, radii)`` of a set.

    Normals are shared; offsets, centres and radii keep the batch axes.
    """
    if isinstance(g, Ball):
        return np.zeros((0, g.m)), np.zeros(g.batch_shape + (0,)), [g.center], [g.radius]
    if isinstance(g, Intersection):
        parts = [_batched_primitives(h) for h in g.members]
        normals = np.vstack([p[0] for p in parts])
        offsets = np.concatenate(_broadcast_offsets([np.asarray(p[1]) for p in parts]), axis=-1)
        return normals, offsets, sum((p[2] for p in parts), []), sum((p[3] for p in parts), [])
    normals, offsets = g.halfspaces()
    return normals, offsets, [], []


ACTIVE_SET_LIMIT = 4096
SINGLE_FACET_LIMIT = 32


def _project_primitives(x, normals, offsets, centres, radii, fallback=None, mask=None, owner=None):
    """Projection onto ``{a_i . y <= b_i} and {|y - c_j| <= r_j}``.

    Points already inside are returned unchanged. Outside points are
    resolved by enumerating active sets of at most ``m`` constraints and
    keeping the candidate that satisfies the KKT conditions; the optimum
    always has such an active set. Several active balls reduce to one sphere
    cut by radical hyperplanes. Points left over (degenerate geometry, or
    too many candidates) go to ``fallback`` or to Dykstra's algorithm.
    Only points flagged by ``mask`` (broadcast batch shape) are resolved.
    With ``owner`` (member index of each halfspace, then of each ball) only
    active sets spanning two or more members are tried.
    """
    m = x.shape[-1]
    k, nb = normals.shape[0], len(centres)
    batch = np.broadcast_shapes(x.shape[:-1], np.shape(offsets)[:-1],
                                *[np.shape(c)[:-1] for c in centres], *[np.shape(r) for r in radii])
    X = np.broadcast_to(x, batch + (m,)).reshape(-1, m)
    B = np.broadcast_to(offsets, batch + (k,)).reshape(-1, k)
    C = np.stack([np.broadcast_to(c, batch + (m,)).reshape(-1, m) for c in centres], axis=1) \
        if nb else np.zeros((len(X), 0, m))
    R = np.stack([np.broadcast_to(r, batch).reshape(-1) for r in radii], axis=1) \
        if nb else np.zeros((len(X), 0))
    out = X.copy()

    def violation(Y):
        v = np.zeros(len(Y))
        if k:
            v = np.maximum(v, np.max(Y @ normals.T - Bt, axis=1))
        if nb:
            v = np.maximum(v, np.max(np.linalg.norm(Y[:, None] - Ct, axis=2) - Rt, axis=1))
        return v

    Bt, Ct, Rt = B, C, R
    todo = np.flatnonzero(violation(X) > 0)
    if mask is not None:
        todo = todo[np.asarray(mask).reshape(-1)[todo]]
    if todo.size == 0:
        return out.reshape(batch + (m,))

    n_sets = sum(math.comb(k + nb, s) for s in range(1, min(m, k + nb) + 1))
    if n_sets <= ACTIVE_SET_LIMIT:
        scale = 1.0 + np.abs(X[todo]).max(axis=1)
        if k:
            scale = scale + np.abs(B[todo]).max(axis=1)
        if nb:
            scale = scale + np.abs(C[todo]).max(axis=(1, 2)) + R[todo].max(axis=1)
        tol = 1e-10 * scale
        single_done = False
        if owner is None and 0 < k <= SINGLE_FACET_LIMIT:
            # every one-facet candidate at once; a feasible one is the projection
            Xt, Bt, Ct, Rt = X[todo], B[todo], C[todo], R[todo]
            lam = Xt @ normals.T - Bt
            cand = Xt[:, None, :] - np.maximum(lam, 0.0)[..., None] * normals
            worst = np.max(cand @ normals.T - Bt[:, None, :], axis=2)
            if nb:
                gap = np.linalg.norm(cand[:, :, None] - Ct[:, None], axis=3) - Rt[:, None]
                worst = np.maximum(worst, gap.max(axis=2))
            good = (lam > 0) & (worst <= tol[:, None])
            ok = good.any(axis=1)
            pick = np.argmax(good, axis=1)
            out[todo[ok]] = cand[np.flatnonzero(ok), pick[ok]]
            todo, tol, scale = todo[~ok], tol[~ok], scale[~ok]
            single_done = True
        for size in range(1, min(m, k + nb) + 1):
            for subset in itertools.combinations(range(k + nb), size):
                if todo.size == 0:
                    break
                if owner is not None and len(set(owner[list(subset)])) < 2:
                    continue
                if single_done and size == 1 and subset[0] < k:
                    continue
                hs = [i for i in subset if i < k]
                bs = [i - k for i in subset if i >= k]
                Bt, Ct, Rt = B[todo], C[todo], R[todo]
                y, ok = _kkt_candidate(X[todo], normals[hs], Bt[:, hs], Ct[:, bs], Rt[:, bs], tol)
                if not np.any(ok):
                    continue
                ok &= violation(y) <= tol
                out[todo[ok]] = y[ok]
                todo, tol, scale = todo[~ok], tol[~ok], scale[~ok]
    if todo.size:
        if fallback is None:
            out[todo] = _dykstra_halfspaces(X[todo], normals, B[todo])
        elif x.ndim == 2 and batch == x.shape[:-1] and not any(
                np.shape(a)[:-1] for a in [offsets] + list(centres)) and not any(np.shape(r) for r in radii):
            out[todo] = fallback(X[todo])
        else:
            # batched set: rerun on the full layout (rare)
            out[todo] = np.asarray(fallback(np.broadcast_to(x, batch + (m,)).copy())).reshape(-1, m)[todo]
    return out.reshape(batch + (m,))


def _kkt_candidate(x, A, b, c, r, tol):
    """Candidate projection with the given constraints active, plus KKT flags.

    ``A`` (s, m) are shared halfspace normals with per-point offsets ``b``
    (P, s); ``c`` (P, q, m) and ``r`` (P, q) are the active balls.
    """
    P, m = x.shape
    q = c.shape[1]
    rows = np.broadcast_to(A, (P,) + A.shape)
    rhs = b
    if q > 1:
        # |y - c0|^2 = r0^2 and |y - cj|^2 = rj^2 imply a linear equation
        c0, r0 = c[:, :1], r[:, :1]
        rows = np.concatenate([rows, 2 * (c[:, 1:] - c0)], axis=1)
        rhs = np.concatenate([rhs, r0**2 - r[:, 1:] ** 2 + np.sum(c[:, 1:] ** 2, axis=2)
                              - np.sum(c0**2, axis=2)], axis=1)
    ok = np.ones(P, dtype=bool)
    if rows.shape[1]:
        G = rows @ np.swapaxes(rows, 1, 2)
        det = np.linalg.det(G)
        ok &= np.abs(det) > 1e-12 * np.prod(np.linalg.norm(rows, axis=2) ** 2, axis=1)
        G = np.where(ok[:, None, None], G, np.eye(G.shape[1]))

        def onto_plane(v):
            lam = np.linalg.solve(G, (np.einsum("psm,pm->ps", rows, v) - rhs)[..., None])[..., 0]
            return v - np.einsum("psm,ps->pm", rows, lam)
    else:
        def onto_plane(v):
            return v
    xp = onto_plane(x)
    if q == 0:
        y = xp
        grads = np.swapaxes(rows, 1, 2)
    else:
        cp = onto_plane(c[:, 0])
        rho2 = r[:, 0] ** 2 - np.sum((c[:, 0] - cp) ** 2, axis=1)
        d = xp - cp
        nd = np.linalg.norm(d, axis=1)
        ok &= (rho2 > 0) & (nd > 1e-14 * (1 + np.abs(x).max(axis=1)))
        y = cp + np.sqrt(np.maximum(rho2, 0.0))[:, None] * d / np.where(nd > 0, nd, 1.0)[:, None]
        grads = np.concatenate([np.broadcast_to(A.T, (P,) + A.T.shape), np.swapaxes(y[:, None] - c, 1, 2)], axis=2)
    # multipliers from x - y = grads @ mult; all must be >= 0
    resid_target = x - y
    M = np.swapaxes(grads, 1, 2) @ grads
    okM = np.abs(np.linalg.det(M)) > 1e-14 * (1 + np.max(np.abs(M), axis=(1, 2))) ** M.shape[1]
    ok &= okM
    M = np.where(okM[:, None, None], M, np.eye(M.shape[1]))
    mult = np.linalg.solve(M, (np.swapaxes(grads, 1, 2) @ resid_target[..., None]))[..., 0]
    fit = np.einsum("pms,ps->pm", grads, mult)
    ok &= np.linalg.norm(fit - resid_target, axis=1) <= tol
    ok &= np.all(mult >= -tol[:, None], axis=1)
    return y, ok



def _dykstra_halfspaces(x, normals, offsets):
    """Dykstra's alternating projections onto an intersection of halfspaces."""
    batch = np.broadcast_shapes(x.shape[:-1], offsets.shape[:-1])
    m = x.shape[-1]
    k = normals.shape[0]
    xb = np.broadcast_to(x, batch + (m,)).reshape(-1, m)
    bb = np.broadcast_to(offsets, batch + (k,)).reshape(-1, k)
    out = xb.copy()
    active = np.any(xb @ normals.T > bb, axis=1)
    if not np.any(active):
        return out.reshape(batch + (m,))
    idx = np.flatnonzero(active)
    y = xb[idx].copy()
    b = bb[idx]
    incr = np.zeros((k,) + y.shape)
    scale = 1.0 + np.abs(b).max(axis=1)
    for _ in range(DYKSTRA_MAX_ITER):
        prev = y
        for i in range(k):
            z = y + incr[i]
            viol = z @ normals[i] - b[:, i]
            y = z - np.maximum(viol, 0.0)[:, None] * normals[i]
            incr[i] = z - y
        move = np.abs(y - prev).max(axis=1)
        feas = np.maximum((y @ normals.T - b).max(axis=1), 0.0)
        done = (move <= DYKSTRA_TOL * (1 + np.abs(y).max(axis=1))) & (feas <= DYKSTRA_FEAS_TOL * scale)
        if np.all(done):
            out[idx] = y
            return out.reshape(batch + (m,))
    raise ProjectionError(
        f"Dykstra projection did not converge in {DYKSTRA_MAX_ITER} iterations"
    )


def _polytope_vertices(normals, offsets):
    """Vertices by exhaustive active-set enumeration.

    Returns ``(vertices, mask)`` with shapes ``batch + (nv, m)`` and
    ``batch + (nv,)``; ``mask`` flags feasible candidates.
    """
    k, m = normals.shape
    verts, masks = [], []
    scale = 1.0 + np.abs(offsets).max(axis=-1)
    for subset in itertools.combinations(range(k), m):
        sub = normals[list(subset)]
        if abs(np.linalg.det(sub)) < 1e-12:
            continue
        rhs = offsets[..., list(subset)]
        v = np.linalg.solve(sub, rhs[..., None])[..., 0] if rhs.ndim > 1 else np.linalg.solve(sub, rhs)
        feasible = np.all(v @ normals.T <= offsets + 1e-9 * scale[..., None], axis=-1)
        verts.append(v)
        masks.append(feasible)
    if not verts:
        raise UnboundedError("Polytope has no vertices")
    return np.stack(verts, axis=-2), np.stack(masks, axis=-1)


def _support_by_vertices(normals, offsets, u):
    verts, mask = _polytope_vertices(normals, offsets)
    # values: batch + (nv,) + u.shape[:-1]
    vals = np.tensordot(verts, u, axes=([-1], [-1]))
    extra = u.ndim - 1
    mask = mask.reshape(mask.shape + (1,) * extra)
    vals = np.where(mask, vals, -np.inf)
    return vals.max(axis=verts.ndim - 2)


def _support_by_linprog(normals, offsets, u):
    u2 = np.atleast_2d(u)
    batch = offsets.shape[:-1]
    flat_b = offsets.reshape(-1, offsets.shape[-1])
    out = np.empty((flat_b.shape[0], u2.shape[0]))
    for bi, b in enumerate(flat_b):
        for di, direction in enumerate(u2):
            res = linprog(-direction, A_ub=normals, b_ub=b, bounds=[(None, None)] * len(direction),
                          method="highs")
            if res.status == 3:
                raise UnboundedError("Polytope unbounded in direction")
            out[bi, di] = -res.fun
    out = out.reshape(batch + u2.shape[:-1])
    return out if u.ndim > 1 else out[..., 0]


# ---------------------------------------------------------------------------
# functional interface and the Hausdorff metric
# ---------------------------------------------------------------------------

def project(g, x):
    return g.project(x)


def distance(g, x):
    return g.distance(x)


def boundary_distance(g, a):
    return g.boundary_distance(a)


def support(g, u):
    u = np.asarray(u, dtype=float)
    norms = np.linalg.norm(u, axis=-1)
    if np.any(np.abs(norms - 1) > 1e-12):
        raise ValueError("support directions must be unit vectors")
    return g.support(u)


def contains(g, x, tol=0.0):
    return g.contains(x, tol)


def direction_mesh(m, directions):
    """Deterministic quasi-uniform unit directions in R^m.

    m=1 uses the two exact directions; m=2 a uniform angular grid; m=3 a
    Fibonacci sphere; m>3 seeded Gaussian directions.
    """
    if m == 1:
        return np.array([[1.0], [-1.0]])
    if directions < 16:
        raise ValueError("at least 16 directions are required")
    if m == 2:
        theta = 2 * np.pi * np.arange(directions) / directions
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if m == 3:
        i = np.arange(directions) + 0.5
        z = 1 - 2 * i / directions
        r = np.sqrt(1 - z * z)
        phi = np.pi * (3 - math.sqrt(5)) * i
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    rng = np.random.default_rng(20240611 + m)
    g = rng.standard_normal((directions, m))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def mesh_angle(m, directions):
    """Covering angle of :func:`direction_mesh` (0 for m=1)."""
    if m == 1:
        return 0.0
    if m == 2:
        return np.pi / directions
    mesh = direction_mesh(m, directions)
    rng = np.random.default_rng(7)
    probes = rng.standard_normal((4000, m))
    probes /= np.linalg.norm(probes, axis=1, keepdims=True)
    cosines = (probes @ mesh.T).max(axis=1)
    return float(np.arccos(np.clip(cosines.min(), -1, 1)))


def hausdorff(g1, g2, directions=256):
    """Hausdorff distance of two bounded convex sets.

    Uses ``rho(G, G') = sup_{|u|=1} |h_G(u) - h_G'(u)|`` on
    :func:`direction_mesh`. Exact for m=1; for m>=2 see
    :func:`hausdorff_resolution`. Batched sets give batched results.
    """
    if not (g1.is_bounded and g2.is_bounded):
        raise UnboundedError("Hausdorff distance needs bounded sets")
    if g1.m != g2.m:
        raise ValueError("sets live in different dimensions")
    mesh = direction_mesh(g1.m, directions)
    h1 = np.asarray(g1.support(mesh))
    h2 = np.asarray(g2.support(mesh))
    return np.abs(h1 - h2).max(axis=-1)


def hausdorff_resolution(g1, g2, directions=256):
    """Resolution bound ``diam * (1 - cos(theta_max))`` of :func:`hausdorff`."""
    theta = mesh_angle(g1.m, directions)
    diam = max(g1.diameter_bound(), g2.diameter_bound())
    return diam * (1 - math.cos(theta))


def from_dict(spec):
    """Inverse of ``ConvexSet.to_dict``."""
    kind = spec.get("type")
    if kind == "ball":
        return Ball(spec["center"], spec["radius"])
    if kind == "box":
        return Box(spec["lower"], spec["upper"])
    if kind == "polytope":
        return Polytope(spec["normals"], spec["offsets"], slater=spec.get("slater"))
    if kind == "intersection":
        return Intersection([from_dict(s) for s in spec["members"]], slater=spec.get("slater"))
    raise ValueError(f"unknown set type {kind!r}")
