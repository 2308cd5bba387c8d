import numpy as np
import pytest

from rbsde.scenario import scenario_from_dict
from rbsde.stochastic import RegressionBackend, TimeGrid, TreeBackend, generate


def make_scenario(validate=False, **raw):
    base = {"name": "test", "m": 1, "d": 1}
    base.update(raw)
    return scenario_from_dict(base, validate=validate)


def box1(lo, hi):
    return {"type": "box", "lower": [lo], "upper": [hi]}


def regression_setup(sc, steps=None, paths=None, seed=None, degree=3):
    grid = sc.make_grid(steps)
    ens = sc.make_ensemble(grid, paths=paths, seed=seed)
    return grid, RegressionBackend(ens, degree=degree)


def tree_setup(sc, steps, paths=200):
    grid = TimeGrid.uniform(sc.T, steps)
    ens = generate(sc.seed, grid, sc.d, paths)
    return grid, TreeBackend(grid, sc.d, ens)


def tree_clamped_y0(lo, hi, steps, T=1.0, terminal=None, region=None):
    """Backward induction on a binomial lattice: y_k = clip(mean of children).

    ``region(t)`` may return ``(lo, hi)`` per time for moving intervals.
    Written independently of the package as an oracle.
    """
    h = np.sqrt(T / steps)
    x = h * (2 * np.arange(steps + 1) - steps)
    y = np.clip(x, lo, hi) if terminal is None else terminal(x)
    for k in range(steps - 1, -1, -1):
        a, b = (lo, hi) if region is None else region(k * T / steps)
        y = np.clip(0.5 * (y[:-1] + y[1:]), a, b)
    return float(y[0])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
