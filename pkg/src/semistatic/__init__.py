"""Calibrated model-free pricing bounds and robust-utility indifference
prices for exotic options on discrete multi-period path lattices."""

from .divergence import (
    AmbiguitySet,
    IntegrandSpec,
    UtilitySpec,
    conjugacy_check,
    divergence_robust,
    divergence_single,
    entropic_quadratic_utility,
    exponential_integrand,
    exponential_utility,
    gamma_penalty,
    quadratic_integrand,
    robust_integral,
)
from .errors import (
    AssumptionViolated,
    BracketInvalid,
    CrossCheckFailed,
    DivergenceInfinite,
    HarnessLimit,
    InfeasiblePolytope,
    IterationLimit,
    LatticeMismatch,
    MeanMismatch,
    NonConvexQuotes,
    ParseError,
    SemistaticError,
    SizeLimit,
)
from .market import (
    CallQuoteCurve,
    Grid,
    Marginal,
    MarginalSystem,
    call_function,
    check_strassen,
    marginal_from_call_quotes,
)
from .optimize import (
    LinearProgram,
    SolveOptions,
    frank_wolfe_min,
    minimize_convex_1d,
    minimize_over_simplex,
    solve_lp,
)
from .polytope import (
    MartingalePolytope,
    PathLattice,
    PathMeasure,
    PrefixNode,
    build_lattice,
    build_polytope,
    feasibility,
    prefix_nodes,
)
from .pricing import (
    DualSolution,
    DynamicStrategy,
    IndifferencePrices,
    Payoff,
    PricingReport,
    StaticPosition,
    call_span_restrict,
    dual_value,
    enumerate_vertices,
    gain_dynamic,
    gain_static,
    indifference_prices,
    mot_bounds,
    payoff_asian_call,
    payoff_forward,
    payoff_lookback,
    payoff_straddle,
    payoff_table,
    payoff_vanilla,
    price_report,
    primal_value,
    trivial_case_check,
)

__version__ = "0.1.0"
