"""Reflected BSDEs in time-dependent random convex regions."""

from .exceptions import (
    HypothesisError,
    PointOutsideError,
    ProjectionError,
    RankDeficientError,
    RBSDEError,
    ResourceError,
    ScenarioError,
    UnboundedError,
)
from .geometry import Ball, Box, ConvexSet, Intersection, Polytope, hausdorff
from .region import RegionPath, discretize, penalization_jump_times, uniform_gap, validate_h4
from .scenario import Scenario, parse_scenario
from .solvers import (
    SolutionEnsemble,
    convergence_sweep,
    solve_fixed_domain,
    solve_local,
    solve_penalized,
    solve_piecewise,
)
from .stochastic import RegressionBackend, TimeGrid, TreeBackend, generate

__version__ = "0.1.0"
