"""
Time grids, seeded Brownian ensembles and conditional-expectation backends.

Two interchangeable backends compute ``E[ . | F_{t_k}]`` in the backward
recursions:

* :class:`RegressionBackend` -- least-squares projection of next-step values
  onto total-degree polynomials of the Brownian state (Monte Carlo paths);
* :class:`TreeBackend` -- exact averages on a recombining binomial lattice
  (``d <= 2``, ``N <= 24``), used as an oracle.

Both expose the same small state-space interface (``n_states``, ``states``,
``condexp``, ``condexp_weighted``, ``lift``) so the solvers never branch on
the backend type.
"""

import itertools
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtri

from .exceptions import RankDeficientError, ResourceError

GRID_SNAP_TOL = 1e-9
DEFAULT_MEMORY_BUDGET_MB = 4096
BLOCK_PATHS = 1024


# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Sorted node times ``0 = t_0 < ... < t_N = T``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing and start at 0")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T, steps, include=(), max_step=None):
        """Uniform grid with ``steps`` steps, plus extra exact nodes ``include``.

        Extra times closer than ``GRID_SNAP_TOL * T`` to an existing node are
        snapped onto it.
        """
        base = list(np.linspace(0.0, T, steps + 1))
        for t in sorted(float(s) for s in include):
            if not (0.0 < t < T):
                continue
            near = min(base, key=lambda s: abs(s - t))
            if abs(near - t) > GRID_SNAP_TOL * T:
                base.append(t)
                base.sort()
        grid = cls(np.array(base))
        if max_step is not None and grid.max_step > max_step * (1 + 1e-12):
            raise ValueError(f"grid step {grid.max_step} exceeds bound {max_step}")
        return grid

    @property
    def T(self):
        return float(self.times[-1])

    @property
    def N(self):
        return len(self.times) - 1

    @cached_property
    def dt(self):
        return np.diff(self.times)

    @property
    def max_step(self):
        return float(self.dt.max())

    @property
    def is_uniform(self):
        return bool(np.ptp(self.dt) <= 1e-12 * self.T)

    def index_of(self, t):
        """Node index of time ``t`` (within the snapping tolerance)."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > GRID_SNAP_TOL * max(self.T, 1.0):
            raise KeyError(f"time {t} is not a grid node")
        return k

    def has_node(self, t):
        return bool(np.min(np.abs(self.times - t)) <= GRID_SNAP_TOL * max(self.T, 1.0))

    def same_as(self, other):
        return self.N == other.N and np.array_equal(self.times, other.times)

    def to_dict(self):
        return {"T": self.T, "N": self.N, "times": self.times.tolist()}


# ---------------------------------------------------------------------------
# Brownian ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """``P`` paths of a ``d``-dimensional Wiener process on ``grid``."""

    seed: int
    grid: TimeGrid
    dW: np.ndarray = field(repr=False)

    @property
    def P(self):
        return self.dW.shape[0]

    @property
    def d(self):
        return self.dW.shape[2]

    @cached_property
    def W(self):
        out = np.zeros((self.P, self.grid.N + 1, self.d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    def at(self, t):
        """Brownian values at node time ``t``, shape ``(P, d)``."""
        return self.W[:, self.grid.index_of(t)]

    def subset(self, paths):
        return BrownianEnsemble(self.seed, self.grid, self.dW[:paths])


def memory_budget_bytes():
    mb = float(os.environ.get("RBSDE_MEMORY_BUDGET_MB", DEFAULT_MEMORY_BUDGET_MB))
    return int(mb * 2**20)


def _block_uniforms(seed, block, count):
    bitgen = np.random.Philox(key=[seed % 2**64, block])
    raw = bitgen.random_raw(count)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def generate(seed, grid, d, P):
    """Seeded Gaussian increments, reproducible per path.

    Paths are produced in blocks of ``BLOCK_PATHS`` from a Philox stream keyed
    by ``(seed, block)``; uniforms are mapped to normals by the inverse CDF,
    so path ``p`` does not depend on ``P``.
    """
    if P < 1 or d < 1:
        raise ValueError("need P >= 1 and d >= 1")
    need = 2 * 8 * P * grid.N * d
    if need > memory_budget_bytes():
        raise ResourceError(
            f"ensemble needs {need / 2**20:.1f} MB, budget is "
            f"{memory_budget_bytes() / 2**20:.1f} MB (RBSDE_MEMORY_BUDGET_MB)"
        )
    per_path = grid.N * d
    blocks = []
    for b in range((P + BLOCK_PATHS - 1) // BLOCK_PATHS):
        take = min(BLOCK_PATHS, P - b * BLOCK_PATHS)
        u = _block_uniforms(seed, b, BLOCK_PATHS * per_path)[: take * per_path]
        blocks.append(ndtri(u).reshape(take, grid.N, d))
    z = np.concatenate(blocks, axis=0)
    dW = z * np.sqrt(grid.dt)[None, :, None]
    return BrownianEnsemble(int(seed), grid, dW)


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def _monomial_exponents(nfeat, degree):
    exps = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(nfeat), total):
            e = [0] * nfeat
            for i in combo:
                e[i] += 1
            exps.append(tuple(e))
    return exps


class RegressionBackend:
    """Least-squares conditional expectations on Monte Carlo paths.

    Basis functions are monomials of total degree ``<= degree`` in the
    standardized features (Brownian coordinates at ``t_k`` plus any extra
    features the caller supplies). Features with zero spread, such as ``W_0``,
    are dropped.
    """

    kind = "regression"

    def __init__(self, ensemble, degree=3, min_paths_per_basis=10):
        self.ensemble = ensemble
        self.degree = int(degree)
        self.min_paths_per_basis = min_paths_per_basis
        self._cache = {}

    @property
    def grid(self):
        return self.ensemble.grid

    @property
    def P(self):
        return self.ensemble.P

    @property
    def d(self):
        return self.ensemble.d

    def n_states(self, k):
        return self.ensemble.P

    def states(self, k):
        return self.ensemble.W[:, k]

    def level_view(self, k):
        return self.ensemble

    def describe(self):
        return {"kind": "regression", "degree": self.degree}

    def _q(self, k, extra=None, key=None):
        cache_key = (k, key)
        if key is not None or extra is None:
            hit = self._cache.get(cache_key)
            if hit is not None:
                return hit
        feats = self.ensemble.W[:, k]
        if extra is not None:
            feats = np.column_stack([feats, np.asarray(extra).reshape(self.P, -1)])
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        keep = std > 1e-12 * (1 + np.abs(mean))
        z = (feats[:, keep] - mean[keep]) / std[keep]
        exps = _monomial_exponents(z.shape[1], self.degree)
        if self.P < self.min_paths_per_basis * len(exps):
            raise RankDeficientError(
                f"{len(exps)} basis functions need at least "
                f"{self.min_paths_per_basis * len(exps)} paths, have {self.P}"
            )
        basis = np.column_stack([np.prod(z ** np.array(e), axis=1) for e in exps])
        q, r = np.linalg.qr(basis)
        diag = np.abs(np.diag(r))
        if diag.min() < 1e-10 * diag.max():
            raise RankDeficientError(f"regression basis is rank deficient at node {k}")
        if key is not None or extra is None:
            self._cache[cache_key] = q
        return q

    def condexp(self, values, k, extra=None, key=None):
        """Fitted values of the projection of ``values`` (at ``t_{k+1}``) at ``t_k``."""
        values = np.asarray(values, dtype=float)
        q = self._q(k, extra, key)
        flat = values.reshape(self.P, -1)
        fitted = q @ (q.T @ flat)
        return fitted.reshape(values.shape)

    def condexp_weighted(self, values, k, coord=None, extra=None, key=None):
        """``E[values * dW_k | F_k]``; trailing axis is the increment coordinate.

        Values are centred by their own conditional expectation first. This
        leaves the target unchanged (``E[c dW_k | F_k] = 0``) and removes most
        of the Monte Carlo noise of the product.
        """
        values = np.asarray(values, dtype=float)
        values = values - self.condexp(values, k, extra, key)
        dw = self.ensemble.dW[:, k]
        dw = dw.reshape((self.P,) + (1,) * (values.ndim - 1) + (self.d,))
        out = self.condexp(values[..., None] * dw, k, extra, key)
        return out if coord is None else out[..., coord]

    def residuals(self, values, k, extra=None, key=None):
        return np.asarray(values) - self.condexp(values, k, extra, key)

    def basis(self, k):
        """Orthonormal basis (columns) used at node ``k``."""
        return self._q(k)

    # lifting node fields onto paths is the identity for Monte Carlo
    def lift(self, field_by_level, start=0):
        return np.stack(field_by_level, axis=1)

    @property
    def path_ensemble(self):
        return self.ensemble


class TreeBackend:
    """Recombining binomial lattice with exact conditional averages.

    Each Brownian coordinate moves by ``+-sqrt(dt)`` with probability 1/2.
    Lattice fields are lifted onto the ``P`` paths of ``ensemble`` by letting
    path ``p`` move up in coordinate ``i`` whenever its Gaussian increment is
    positive, so tree results can be compared path by path with Monte Carlo
    ones.
    """

    kind = "tree"
    max_dim = 2
    max_depth = 24

    def __init__(self, grid, d, ensemble=None):
        if d > self.max_dim:
            raise ValueError(f"tree backend supports d <= {self.max_dim}")
        if grid.N > self.max_depth:
            raise ValueError(f"tree backend supports N <= {self.max_depth}")
        if not grid.is_uniform:
            raise ValueError("tree backend needs a uniform grid (recombination)")
        self.grid = grid
        self.d = int(d)
        self.h = float(np.sqrt(grid.dt[0]))
        if ensemble is None:
            ensemble = generate(0, grid, d, 1)
        if not ensemble.grid.same_as(grid) or ensemble.d != d:
            raise ValueError("lifting ensemble must share grid and dimension")
        self.ensemble = ensemble

    @property
    def P(self):
        return self.ensemble.P

    def describe(self):
        return {"kind": "tree", "depth": self.grid.N}

    def n_states(self, k):
        return (k + 1) ** self.d

    def states(self, k):
        pos = self.h * (2 * np.arange(k + 1) - k)
        if self.d == 1:
            return pos[:, None]
        a, b = np.meshgrid(pos, pos, indexing="ij")
        return np.column_stack([a.ravel(), b.ravel()])

    def level_view(self, k):
        return _LevelView(self, k)

    def condexp(self, values, k, extra=None, key=None):
        v = np.asarray(values, dtype=float)
        if self.d == 1:
            return 0.5 * (v[:-1] + v[1:])
        n = k + 2
        g = v.reshape((n, n) + v.shape[1:])
        avg = 0.25 * (g[:-1, :-1] + g[1:, :-1] + g[:-1, 1:] + g[1:, 1:])
        return avg.reshape(((k + 1) ** 2,) + v.shape[1:])

    def condexp_weighted(self, values, k, coord=None, extra=None, key=None):
        v = np.asarray(values, dtype=float)
        if self.d == 1:
            out = (0.5 * self.h * (v[1:] - v[:-1]))[..., None]
        else:
            n = k + 2
            g = v.reshape((n, n) + v.shape[1:])
            w1 = 0.25 * self.h * (g[1:, :-1] + g[1:, 1:] - g[:-1, :-1] - g[:-1, 1:])
            w2 = 0.25 * self.h * (g[:-1, 1:] + g[1:, 1:] - g[:-1, :-1] - g[1:, :-1])
            shape = ((k + 1) ** 2,) + v.shape[1:]
            out = np.stack([w1.reshape(shape), w2.reshape(shape)], axis=-1)
        return out if coord is None else out[..., coord]

    @cached_property
    def _ups(self):
        up = (self.ensemble.dW > 0).astype(int)
        ups = np.zeros((self.P, self.grid.N + 1, self.d), dtype=int)
        np.cumsum(up, axis=1, out=ups[:, 1:])
        return ups

    def node_index(self, k):
        u = self._ups[:, k]
        if self.d == 1:
            return u[:, 0]
        return u[:, 0] * (k + 1) + u[:, 1]

    def lift(self, field_by_level, start=0):
        return np.stack([f[self.node_index(start + i)] for i, f in enumerate(field_by_level)], axis=1)

    @cached_property
    def path_ensemble(self):
        """Ensemble whose increments are the lattice moves of the lifted paths."""
        dW = self.h * np.where(self.ensemble.dW > 0, 1.0, -1.0)
        return BrownianEnsemble(self.ensemble.seed, self.grid, dW)


class _LevelView:
    """Region-state view of one tree level; only time ``t_k`` is observable."""

    def __init__(self, tree, k):
        self.tree = tree
        self.k = k

    def at(self, t):
        if self.tree.grid.index_of(t) != self.k:
            raise ValueError(
                "tree backend cannot evaluate a region frozen at an earlier time "
                "(state is not Markov in W_t); use the regression backend"
            )
        return self.tree.states(self.k)


def condexp(backend, values, k, **kw):
    return backend.condexp(values, k, **kw)


def condexp_weighted(backend, values, k, coord=None, **kw):
    return backend.condexp_weighted(values, k, coord=coord, **kw)


def h2_norm_estimate(martingale_increments=None, drift_increments=None):
    """Monte Carlo ``H^2`` norm ``||[M]_T^{1/2}||_2 + || |B|_T ||_2``.

    Increments have shape ``(P, N)`` or ``(P, N, m)``; realized quadratic
    variation is used for the martingale part and realized total variation
    for the drift part.
    """
    total = 0.0
    if martingale_increments is not None:
        dm = np.asarray(martingale_increments, dtype=float)
        dm = dm.reshape(dm.shape[0], dm.shape[1], -1)
        qv = np.sum(dm**2, axis=(1, 2))
        total += float(np.sqrt(np.mean(qv)))
    if drift_increments is not None:
        db = np.asarray(drift_increments, dtype=float)
        db = db.reshape(db.shape[0], db.shape[1], -1)
        var = np.sum(np.linalg.norm(db, axis=2), axis=1)
        total += float(np.sqrt(np.mean(var**2)))
    return total
