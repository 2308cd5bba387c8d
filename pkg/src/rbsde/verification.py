"""
Numerical diagnostics on :class:`~rbsde.solvers.SolutionEnsemble` objects.

Every check returns a :class:`DiagnosticReport` whose rows carry the
statistic, the threshold it was compared with, and the worst path/time.
Rows with ``asserted=False`` are informative only and never fail a run.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .region import jump_size
from .solvers import _PathState
from .stochastic import BrownianEnsemble, TimeGrid, h2_norm_estimate

EXACT_TOL = 1e-12
JUMP_TOL = 1e-10
SKOROKHOD_TOL = 1e-3
ADMISSIBLE_TOL = 1e-9


@dataclass
class Check:
    name: str
    statistic: float
    threshold: float
    passed: bool
    worst_path: int = None
    worst_time: float = None
    asserted: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "name": self.name, "statistic": self.statistic, "threshold": self.threshold,
            "passed": self.passed, "worst_path": self.worst_path, "worst_time": self.worst_time,
            "asserted": self.asserted, "details": self.details,
        }


@dataclass
class DiagnosticReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks if c.asserted)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def extend(self, other):
        self.checks.extend(other.checks)
        return self

    def to_dict(self):
        return {"passed": self.passed, "checks": [c.to_dict() for c in self.checks]}


def _argmax2(a):
    p, k = np.unravel_index(int(np.argmax(a)), a.shape)
    return int(p), int(k)


def _state(sol):
    return _PathState(sol)


def _ensemble(sol):
    return BrownianEnsemble(0, TimeGrid(sol.times), sol.dW)


def _node_sets(sol, k, left=False):
    t = sol.times[k]
    return sol.region.left_limit(t, _state(sol)) if left else sol.region.snapshot(t, _state(sol))


def _witness(sol, k, left=False):
    t = sol.times[k]
    a = sol.region.witness_left(t, _state(sol)) if left else sol.region.witness(t, _state(sol))
    return np.broadcast_to(np.asarray(a, dtype=float), (sol.P, sol.m))


# ---------------------------------------------------------------------------
# containment, Skorokhod, jumps
# ---------------------------------------------------------------------------

def containment_threshold(sol, constant=1.0):
    if sol.scheme == "penalized":
        return constant / sol.parameter
    return EXACT_TOL


def containment_profile(sol):
    """``dist(Y_k, D_{t_k})`` for every path and node, shape ``(P, N+1)``."""
    return np.stack([np.atleast_1d(_node_sets(sol, k).distance(sol.Y[:, k])) * np.ones(sol.P)
                     for k in range(sol.N + 1)], axis=1)


def check_containment(sol, threshold=None, constant=1.0):
    """Largest distance of ``Y`` (and of stored left limits) to the region."""
    thr = containment_threshold(sol, constant) if threshold is None else threshold
    dist = containment_profile(sol)
    for k in sol.jump_nodes:
        g = _node_sets(sol, k, left=True)
        dist[:, k] = np.maximum(dist[:, k], np.atleast_1d(g.distance(sol.Y_left[:, k])))
    p, k = _argmax2(dist)
    stat = float(dist[p, k])
    return DiagnosticReport([Check("containment", stat, thr, stat <= thr, p, float(sol.times[k]))])


def _constant_proposals(sol, count, rng):
    g0 = _node_sets(sol, 0)
    radius = float(np.max(g0.bounding_radius())) if hasattr(g0, "bounding_radius") else 1.0
    return [rng.normal(scale=radius, size=sol.m) for _ in range(count)]


def skorokhod_test_processes(sol, count=10, seed=0, perturbation=0.5):
    """Admissible test processes as ``(description, X, X_left)`` arrays ``(P, N+1, m)``.

    The first is the witness; the rest alternate between projections of
    random constants and projections of ``Y`` plus a bounded random
    perturbation.
    """
    rng = np.random.default_rng(seed)
    N = sol.N
    out = []
    X = np.stack([_witness(sol, k) for k in range(N + 1)], axis=1)
    Xl = X.copy()
    for k in sol.jump_nodes:
        Xl[:, k] = _witness(sol, k, left=True)
    out.append(("witness", X, Xl))
    rest = count - 1
    n_const = (rest + 1) // 2
    for c in _constant_proposals(sol, n_const, rng):
        X = np.stack([np.broadcast_to(_node_sets(sol, k).project(c), (sol.P, sol.m))
                      for k in range(N + 1)], axis=1)
        Xl = X.copy()
        for k in sol.jump_nodes:
            Xl[:, k] = _node_sets(sol, k, left=True).project(c)
        out.append((f"projected constant {np.round(c, 6).tolist()}", X, Xl))
    for i in range(rest - n_const):
        eps = rng.uniform(-perturbation, perturbation, size=sol.Y.shape)
        X = np.stack([_node_sets(sol, k).project(sol.Y[:, k] + eps[:, k]) for k in range(N + 1)], axis=1)
        Xl = X.copy()
        for k in sol.jump_nodes:
            Xl[:, k] = _node_sets(sol, k, left=True).project(sol.Y_left[:, k] + eps[:, k])
        out.append((f"projected perturbation #{i}", X, Xl))
    for desc, X, Xl in out:
        _assert_admissible(sol, desc, X, Xl)
    return out


def _assert_admissible(sol, desc, X, Xl):
    for k in range(sol.N + 1):
        d = np.atleast_1d(_node_sets(sol, k).distance(X[:, k]))
        if np.any(d > ADMISSIBLE_TOL):
            raise RuntimeError(f"test process {desc!r} leaves the region at t={sol.times[k]}")
    for k in sol.jump_nodes:
        d = np.atleast_1d(_node_sets(sol, k, left=True).distance(Xl[:, k]))
        if np.any(d > ADMISSIBLE_TOL):
            raise RuntimeError(f"test process {desc!r} left limit leaves the region at t={sol.times[k]}")


def skorokhod_sums(sol, X, X_left):
    """Per-path sums of ``<Y_{s-} - X_{s-}, dK_s>``."""
    cont = np.einsum("pkm,pkm->p", sol.Y[:, :-1] - X[:, :-1], sol.Kc_inc)
    jump = np.einsum("pkm,pkm->p", sol.Y_left - X_left, sol.Kd_jump)
    return cont + jump


def check_skorokhod(sol, count=10, seed=0, perturbation=0.5, tol=SKOROKHOD_TOL):
    """Largest normalized Skorokhod sum ``S_p / (1 + |K|_T,p)`` over test processes."""
    scale = 1.0 + sol.K_variation
    worst, worst_p, worst_desc = -math.inf, None, None
    stats = {}
    for desc, X, Xl in skorokhod_test_processes(sol, count, seed, perturbation):
        s = skorokhod_sums(sol, X, Xl) / scale
        p = int(np.argmax(s))
        stats[desc] = float(s[p])
        if s[p] > worst:
            worst, worst_p, worst_desc = float(s[p]), p, desc
    return DiagnosticReport([Check("skorokhod", worst, tol, worst <= tol, worst_p, None,
                                   details={"worst_process": worst_desc, "per_process": stats,
                                            "count": count, "seed": seed})])


def check_jump_projection(sol, tol=JUMP_TOL):
    """``dK_s = P_{D_s-}(Y_s) - Y_s = -dY_s`` at region jump nodes."""
    region = sol.region
    defect, gap = 0.0, 0.0
    where = (None, None)
    nodes = 0
    for t in region.jump_times:
        k = int(np.argmin(np.abs(sol.times - t)))
        if abs(sol.times[k] - t) > 1e-9:
            continue
        nodes += 1
        g_left = region.left_limit(t, _state(sol))
        expect = g_left.project(sol.Y[:, k]) - sol.Y[:, k]
        if sol.scheme == "penalized":
            mask = np.asarray(jump_size(region, t, _state(sol), cap=sol.parameter)) > 1.0 / sol.parameter
            expect = np.where(np.broadcast_to(mask, (sol.P,))[:, None], expect, 0.0)
        err = np.linalg.norm(sol.Kd_jump[:, k] - expect, axis=1)
        dy = np.linalg.norm(sol.Kd_jump[:, k] + (sol.Y[:, k] - sol.Y_left[:, k]), axis=1)
        if err.max() > defect:
            defect, where = float(err.max()), (int(err.argmax()), float(t))
        gap = max(gap, float(dy.max()))
    stat = max(defect, gap)
    return DiagnosticReport([Check("jump_projection", stat, tol, stat <= tol, where[0], where[1],
                                   details={"jump_nodes": nodes, "formula_defect": defect,
                                            "dK_plus_dY": gap})])


def check_boundary_support(sol, tol=EXACT_TOL):
    """Reflection only acts where ``Y`` sits on the boundary (projection schemes)."""
    worst, wp, wk = 0.0, None, None
    for k in range(sol.N):
        depth = np.atleast_1d(_node_sets(sol, k).depth(sol.Y[:, k])) * np.ones(sol.P)
        mass = np.linalg.norm(sol.Kc_inc[:, k], axis=1)
        off = np.where(depth > tol, mass, 0.0)
        if off.max() > worst:
            worst, wp, wk = float(off.max()), int(off.argmax()), float(sol.times[k])
    return DiagnosticReport([Check("boundary_support", worst, tol, worst <= tol, wp, wk)])


def check_witness_inequality(sol, tol=1e-6):
    """``sum <Y - A, dK> <= -sum dist(A, boundary) |dK|`` per path."""
    lhs = np.zeros(sol.P)
    rhs = np.zeros(sol.P)
    for k in range(sol.N):
        a = _witness(sol, k)
        lhs += np.einsum("pm,pm->p", sol.Y[:, k] - a, sol.Kc_inc[:, k])
        depth = np.atleast_1d(_node_sets(sol, k).depth(a)) * np.ones(sol.P)
        rhs -= depth * np.linalg.norm(sol.Kc_inc[:, k], axis=1)
    for k in sol.jump_nodes:
        a = _witness(sol, k, left=True)
        lhs += np.einsum("pm,pm->p", sol.Y_left[:, k] - a, sol.Kd_jump[:, k])
        depth = np.atleast_1d(_node_sets(sol, k, left=True).depth(a)) * np.ones(sol.P)
        rhs -= depth * np.linalg.norm(sol.Kd_jump[:, k], axis=1)
    excess = (lhs - rhs) / (1 + sol.K_variation)
    p = int(np.argmax(excess))
    return DiagnosticReport([Check("witness_inequality", float(excess[p]), tol, excess[p] <= tol, p)])


def check_equation_residual(sol, sigmas=3.0):
    """One-step residuals of the backward equation have mean zero.

    ``r_k = Y_k - Y_{k+1} - dK_k - dt f_k + Z_k dW_k`` with the driver term
    stored by the solver. The standard error adds the spread of ``Z dW``
    because ``r_k`` and ``Z_k dW_k`` are strongly anti-correlated. The
    statistic is ``max_k |mean_p r_k| / (sigmas * se_k)``.
    """
    worst, wk = 0.0, None
    for k in range(sol.N):
        zdw = np.einsum("pmd,pd->pm", sol.Z[:, k], sol.dW[:, k])
        r = sol.Y[:, k] - sol.Y[:, k + 1] - sol.dK[:, k] - sol.drift[:, k] + zdw
        se = (r.std(axis=0) + zdw.std(axis=0)) / math.sqrt(sol.P)
        mean = np.abs(r.mean(axis=0))
        ratio = float(np.max(np.where(mean > 1e-12, mean / (sigmas * se + 1e-300), 0.0)))
        if ratio > worst:
            worst, wk = ratio, float(sol.times[k])
    return DiagnosticReport([Check("equation_residual", worst, 1.0, worst <= 1.0, None, wk)])


# ---------------------------------------------------------------------------
# a priori and stability estimates
# ---------------------------------------------------------------------------

def apriori_terms(sol, scenario):
    """Empirical left- and right-hand sides of the a priori estimate."""
    y_all = np.concatenate([sol.Y, sol.Y_left], axis=1)
    sup_y2 = np.max(np.sum(y_all**2, axis=-1), axis=1)
    z2 = np.einsum("pkmd,pkmd,k->p", sol.Z, sol.Z, sol.dt)
    jumps2 = np.sum(sol.Kd_jump**2, axis=(1, 2))
    sup_k2 = np.max(np.sum(sol.K**2, axis=-1), axis=1)
    dist_dk = np.zeros(sol.P)
    for k in range(sol.N):
        a = _witness(sol, k)
        depth = np.maximum(np.atleast_1d(_node_sets(sol, k).depth(a)), 0.0)
        dist_dk += depth * np.linalg.norm(sol.Kc_inc[:, k], axis=1)
    for k in sol.jump_nodes:
        a = _witness(sol, k, left=True)
        depth = np.maximum(np.atleast_1d(_node_sets(sol, k, left=True).depth(a)), 0.0)
        dist_dk += depth * np.linalg.norm(sol.Kd_jump[:, k], axis=1)
    lhs = {
        "sup_Y2": float(sup_y2.mean()),
        "int_Z2": float(z2.mean()),
        "sum_jumpK2": float(jumps2.mean()),
        "sup_K2": float(sup_k2.mean()),
        "int_dist_dK": float(dist_dk.mean()),
    }
    zero_y = np.zeros((1, sol.m))
    zero_z = np.zeros((1, sol.m, sol.dW.shape[2]))
    f0 = sum(float(np.sum(scenario.driver(t, zero_y, zero_z) ** 2)) * dt
             for t, dt in zip(sol.times[:-1], sol.dt))
    dm, db = sol.region.witness_increments(_ensemble(sol))
    a_norm = h2_norm_estimate(dm, db)
    a0 = _witness(sol, 0)
    # [M]_T counts the starting value (Protter's convention [M]_0 = M_0^2)
    a_norm += float(np.sqrt(np.mean(np.sum(a0**2, axis=-1))))
    rhs = {
        "E_xi2": float(np.mean(np.sum(sol.xi**2, axis=-1))),
        "int_f0_2": f0,
        "witness_H2_sq": a_norm**2,
    }
    return lhs, rhs


def check_apriori(sol, scenario):
    lhs, rhs = apriori_terms(sol, scenario)
    checks = [Check(f"apriori.{k}", v, math.inf, bool(np.isfinite(v))) for k, v in lhs.items()]
    total_l, total_r = sum(lhs.values()), sum(rhs.values())
    if total_l == 0:
        ratio = 0.0
    elif total_r == 0:
        ratio = math.inf
    else:
        ratio = total_l / total_r
    checks.append(Check("apriori.ratio", ratio, math.inf, bool(np.isfinite(ratio)), asserted=False,
                        details={"lhs": lhs, "rhs": rhs}))
    return DiagnosticReport(checks)


def relative_stability(name, a, b, band=0.2):
    """Row comparing two estimates that should agree within ``band``."""
    scale = max(abs(a), abs(b))
    rel = 0.0 if scale == 0 else abs(a - b) / scale
    return Check(name, rel, band, rel <= band, details={"first": a, "second": b})


def _same_paths(sol, sol2):
    if sol.Y.shape != sol2.Y.shape or not np.array_equal(sol.times, sol2.times):
        raise ValueError("solutions live on different grids")
    if not np.array_equal(sol.W, sol2.W):
        raise ValueError("solutions use different Brownian ensembles")


def stability_terms(sol, sol2, p=2.0):
    _same_paths(sol, sol2)
    yb = sol.Y - sol2.Y
    ybl = sol.Y_left - sol2.Y_left
    mag = np.linalg.norm(np.concatenate([yb, ybl], axis=1), axis=-1)
    sup = np.max(mag, axis=1) ** p
    node = np.linalg.norm(yb[:, :-1], axis=-1)
    weight = np.where(node > 0, node ** (p - 2) if p != 2 else 1.0, 0.0)
    zb = sol.Z - sol2.Z
    zint = np.einsum("pk,pkmd,pkmd,k->p", weight, zb, zb, sol.dt)
    xi_b = np.linalg.norm(sol.xi - sol2.xi, axis=-1) ** p
    terms = {"sup_Ybar_p": float(sup.mean()), "int_Ybar_Zbar": float(zint.mean()),
             "E_xibar_p": float(xi_b.mean())}
    if p == 2:
        kd = sol.Kd_jump - sol2.Kd_jump
        terms["I_T"] = float(np.sum(kd**2, axis=(1, 2)).mean())
    return terms


def _cross_terms(sol, sol2):
    cross = np.zeros(sol.P)
    composite = np.zeros(sol.P)
    for k in range(sol.N):
        g, g2 = _node_sets(sol, k), _node_sets(sol2, k)
        dk = np.linalg.norm(sol.dK[:, k], axis=1)
        dk2 = np.linalg.norm(sol2.dK[:, k], axis=1)
        cross += np.atleast_1d(g.distance(sol2.Y[:, k])) * dk + np.atleast_1d(g2.distance(sol.Y[:, k])) * dk2
        p2 = g2.project(sol2.Y[:, k])
        composite += np.linalg.norm(g.project(p2) - p2, axis=1) * dk
    return float(cross.mean()), float(composite.mean())


def check_stability(sol, sol2, p=2.0):
    """Stability of the solution map under terminal perturbations."""
    terms = stability_terms(sol, sol2, p)
    denom = terms["E_xibar_p"]
    if denom == 0:
        ratio_sup = 0.0 if terms["sup_Ybar_p"] == 0 else math.inf
        ratio_all = 0.0 if sum(terms.values()) == 0 else math.inf
    else:
        ratio_sup = terms["sup_Ybar_p"] / denom
        ratio_all = (sum(terms.values()) - denom) / denom
    cross, composite = _cross_terms(sol, sol2)
    checks = [
        Check("stability.sup_ratio", ratio_sup, math.inf, bool(np.isfinite(ratio_sup)), details=terms),
        Check("stability.total_ratio", ratio_all, math.inf, bool(np.isfinite(ratio_all))),
        Check("stability.cross_term", cross, math.inf, True, asserted=False),
        Check("stability.composite_term", composite, math.inf, True, asserted=False),
    ]
    return DiagnosticReport(checks)


def stability_band(ratio_a, ratio_b, factor=2.0):
    """Row asserting two stability ratios agree within a multiplicative factor."""
    if ratio_a == 0 and ratio_b == 0:
        q = 1.0
    elif ratio_a == 0 or ratio_b == 0:
        q = math.inf
    else:
        q = ratio_b / ratio_a
    return Check("stability.ratio_band", q, factor, 1.0 / factor <= q <= factor,
                 details={"first": ratio_a, "second": ratio_b})


# ---------------------------------------------------------------------------
# metrics and convergence tables
# ---------------------------------------------------------------------------

def solution_distance(sol, sol2):
    """Capped sup-distance for ``Y`` and ``K`` and capped ``L2(dt)`` distance for ``Z``."""
    _same_paths(sol, sol2)
    yb = np.concatenate([sol.Y - sol2.Y, sol.Y_left - sol2.Y_left], axis=1)
    dy = np.minimum(np.max(np.linalg.norm(yb, axis=-1), axis=1), 1.0).mean()
    zb = sol.Z - sol2.Z
    dz = np.minimum(np.einsum("pkmd,pkmd,k->p", zb, zb, sol.dt), 1.0).mean()
    dk = np.minimum(np.max(np.linalg.norm(sol.K - sol2.K, axis=-1), axis=1), 1.0).mean()
    return float(dy), float(dz), float(dk)


def convergence_table(entries, containment_constant=1.0, skorokhod_count=10):
    """Rows of parameter vs successive distances, containment and Skorokhod.

    ``rate_*`` columns are ``log2`` of the ratio of successive values.
    Entries with a ``stats`` dict holding ``containment`` and ``skorokhod``
    reuse those values instead of recomputing them.
    """
    rows = []
    prev = None
    for e in entries:
        sol = e.solution
        known = getattr(e, "stats", None) or {}
        cont = known.get("containment")
        if cont is None:
            cont = check_containment(sol, constant=containment_constant).checks[0].statistic
        sko = known.get("skorokhod")
        if sko is None:
            sko = check_skorokhod(sol, count=skorokhod_count).checks[0].statistic
        dy, dz, dk = e.distance_to_previous if e.distance_to_previous else (math.nan,) * 3
        row = {"parameter": e.parameter, "delta_Y": dy, "delta_Z": dz, "delta_K": dk,
               "containment": cont, "skorokhod": sko}
        for col in ("delta_Y", "containment"):
            a = prev[col] if prev else math.nan
            b = row[col]
            row[f"rate_{col}"] = math.log2(a / b) if (prev and a > 0 and b > 0) else math.nan
        rows.append(row)
        prev = row
    return rows
