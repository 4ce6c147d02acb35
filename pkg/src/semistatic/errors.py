"""Exception hierarchy shared across the package."""
from __future__ import annotations


class SemistaticError(Exception):
    """Base class for all domain errors raised by this package."""


class NonConvexQuotes(SemistaticError):
    """Call quotes admit static arbitrage or cannot determine a distribution."""


class MeanMismatch(SemistaticError):
    """Implied distribution mean differs from the configured spot."""


class SizeLimit(SemistaticError):
    """Path lattice exceeds the configured size cap."""


class HarnessLimit(SemistaticError):
    """Instance too large for a verification harness."""


class LatticeMismatch(SemistaticError):
    """Operands live on different path lattices."""


class BracketInvalid(SemistaticError):
    """1-D search bracket is empty, reversed or non-finite."""


class IterationLimit(SemistaticError):
    """Hard iteration cap exhausted without convergence."""


class InfeasiblePolytope(SemistaticError):
    """Operation requires a non-empty martingale polytope."""


class AssumptionViolated(SemistaticError):
    """No calibrated measure with finite divergence exists for this instance."""


class DivergenceInfinite(SemistaticError):
    """Measure is not absolutely continuous w.r.t. the ambiguity hull."""


class CrossCheckFailed(SemistaticError):
    """Two independent solution routes disagree beyond tolerance."""


class ParseError(SemistaticError):
    """Instance file is malformed or violates the schema."""
