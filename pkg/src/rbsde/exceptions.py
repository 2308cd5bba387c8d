"""Exception types raised across the package."""


class RBSDEError(Exception):
    """Base class for all package errors."""


class ProjectionError(RBSDEError):
    """Iterative projection did not reach its tolerance (degenerate polytope)."""


class PointOutsideError(RBSDEError, ValueError):
    """A point expected to lie in a set lies outside it."""


class UnboundedError(RBSDEError, ValueError):
    """An operation that needs a bounded set received an unbounded one."""


class RankDeficientError(RBSDEError):
    """Regression design matrix is rank deficient (basis too rich for the sample)."""


class ResourceError(RBSDEError, MemoryError):
    """Requested allocation exceeds the configured memory budget."""


class ScenarioError(RBSDEError, ValueError):
    """Malformed scenario file or field."""


class HypothesisError(RBSDEError, ValueError):
    """A standing hypothesis (H1)-(H4) is violated by a scenario.

    ``hypothesis`` holds the tag (``"H1"`` ... ``"H4"``); ``path`` and ``time``
    locate the first offence when known.
    """

    def __init__(self, hypothesis, message, path=None, time=None):
        self.hypothesis = hypothesis
        self.path = path
        self.time = time
        where = ""
        if time is not None:
            where = f" (first offence at t={time:.6g}"
            where += f", path {path})" if path is not None else ")"
        super().__init__(f"({hypothesis}) {message}{where}")
