"""Batch front end: parse JSON instance files, run validation / pricing /
verification, emit deterministic machine-readable reports.

Exit codes: 0 success, 1 domain infeasibility or assumption failure,
2 parse error, 3 harness or size limit.
"""
from __future__ import annotations

import argparse
import json
import math
import sys as _sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import errors
from .divergence import (
    AmbiguitySet,
    UtilitySpec,
    conjugacy_check,
    exponential_integrand,
    quadratic_integrand,
    utility_from_config,
    utility_integrand,
)
from .market import (
    CallQuoteCurve,
    Grid,
    Marginal,
    MarginalSystem,
    check_strassen,
    marginal_from_call_quotes,
)
from .optimize import SolveOptions
from .polytope import (
    MartingalePolytope,
    PathLattice,
    PathMeasure,
    build_polytope,
    feasibility,
)
from .pricing import (
    Payoff,
    enumerate_vertices,
    mot_bounds,
    payoff_asian_call,
    payoff_forward,
    payoff_lookback,
    payoff_straddle,
    payoff_table,
    payoff_vanilla,
    price_report,
    trivial_case_check,
    weak_duality_max_violation,
)

SCHEMA_VERSION = 1

_EXIT_OK = 0
_EXIT_DOMAIN = 1
_EXIT_PARSE = 2
_EXIT_LIMIT = 3


# ---------------------------------------------------------------------------
# Instance parsing
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise errors.ParseError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise errors.ParseError(f"{where}: unknown fields {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise errors.ParseError(f"{where}: missing fields {sorted(missing)}")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise errors.ParseError(f"{where}: expected a number")
    v = float(value)
    if not math.isfinite(v):
        raise errors.ParseError(f"{where}: must be finite")
    return v


def _number_list(value, where: str) -> List[float]:
    if not isinstance(value, list) or not value:
        raise errors.ParseError(f"{where}: expected a non-empty array of numbers")
    return [_number(v, where) for v in value]


@dataclass
class Instance:
    """Parsed and validated instance file."""

    sys: MarginalSystem
    prior_specs: List[dict]
    utility: UtilitySpec
    payoff_spec: dict
    x: float
    opts: SolveOptions
    max_paths: int


def parse_instance(doc: dict, *, where: str = "instance") -> Instance:
    _check_keys(
        doc,
        allowed={"schema_version", "s0", "marginals", "priors", "utility",
                 "payoff", "x", "solver"},
        required={"s0", "marginals", "priors", "utility", "payoff"},
        where=where,
    )
    if "schema_version" in doc and doc["schema_version"] != SCHEMA_VERSION:
        raise errors.ParseError(f"unsupported schema_version {doc['schema_version']!r}")
    s0 = _number(doc["s0"], "s0")

    if not isinstance(doc["marginals"], list) or not doc["marginals"]:
        raise errors.ParseError("marginals: expected a non-empty array")
    marginals = []
    for i, entry in enumerate(doc["marginals"]):
        where_i = f"marginals[{i}]"
        if not isinstance(entry, dict):
            raise errors.ParseError(f"{where_i}: expected an object")
        if "grid" in entry:
            _check_keys(entry, {"grid", "pmf"}, {"grid", "pmf"}, where_i)
            try:
                marginals.append(
                    Marginal(Grid(_number_list(entry["grid"], where_i + ".grid")),
                             _number_list(entry["pmf"], where_i + ".pmf"))
                )
            except ValueError as exc:
                raise errors.ParseError(f"{where_i}: {exc}") from exc
        elif "strikes" in entry:
            _check_keys(entry, {"strikes", "call_prices"}, {"strikes", "call_prices"}, where_i)
            curve = CallQuoteCurve(
                maturity_index=i + 1,
                strikes=_number_list(entry["strikes"], where_i + ".strikes"),
                prices=_number_list(entry["call_prices"], where_i + ".call_prices"),
            )
            marginals.append(marginal_from_call_quotes(curve, s0))
        else:
            raise errors.ParseError(f"{where_i}: need either grid/pmf or strikes/call_prices")
    try:
        system = MarginalSystem(s0, tuple(marginals))
    except ValueError as exc:
        raise errors.ParseError(str(exc)) from exc

    if not isinstance(doc["priors"], list) or not doc["priors"]:
        raise errors.ParseError("priors: expected a non-empty array")
    prior_specs = []
    for i, entry in enumerate(doc["priors"]):
        where_i = f"priors[{i}]"
        if not isinstance(entry, dict):
            raise errors.ParseError(f"{where_i}: expected an object")
        if "weights" in entry:
            _check_keys(entry, {"weights"}, {"weights"}, where_i)
            prior_specs.append({"weights": _number_list(entry["weights"], where_i)})
        elif "name" in entry:
            name = entry.get("name")
            if name == "uniform":
                _check_keys(entry, {"name"}, {"name"}, where_i)
                prior_specs.append({"name": "uniform"})
            elif name == "product":
                _check_keys(entry, {"name"}, {"name"}, where_i)
                prior_specs.append({"name": "product"})
            elif name == "tilted":
                _check_keys(entry, {"name", "theta"}, {"name", "theta"}, where_i)
                prior_specs.append({"name": "tilted", "theta": _number(entry["theta"], where_i)})
            else:
                raise errors.ParseError(f"{where_i}: unknown prior name {name!r}")
        else:
            raise errors.ParseError(f"{where_i}: need weights or name")

    util_doc = doc["utility"]
    _check_keys(util_doc, {"kind", "a", "kappa"}, {"kind"}, "utility")
    kind = util_doc["kind"]
    try:
        if kind == "exponential":
            _check_keys(util_doc, {"kind", "a"}, {"kind"}, "utility")
            utility = utility_from_config("exponential", {"a": util_doc.get("a", 1.0)})
        elif kind == "entropic_quadratic":
            _check_keys(util_doc, {"kind", "kappa"}, {"kind", "kappa"}, "utility")
            utility = utility_from_config("entropic_quadratic", {"kappa": util_doc["kappa"]})
        else:
            raise errors.ParseError(f"utility: unknown kind {kind!r}")
    except ValueError as exc:
        raise errors.ParseError(f"utility: {exc}") from exc

    payoff_doc = doc["payoff"]
    if not isinstance(payoff_doc, dict):
        raise errors.ParseError("payoff: expected an object")
    if "table" in payoff_doc:
        _check_keys(payoff_doc, {"table"}, {"table"}, "payoff")
        payoff_spec = {"table": _number_list(payoff_doc["table"], "payoff.table")}
    elif "builtin" in payoff_doc:
        name = payoff_doc["builtin"]
        if name == "forward":
            _check_keys(payoff_doc, {"builtin"}, {"builtin"}, "payoff")
            payoff_spec = {"builtin": "forward"}
        elif name == "straddle":
            _check_keys(payoff_doc, {"builtin", "i", "j"}, {"builtin"}, "payoff")
            payoff_spec = {
                "builtin": "straddle",
                "i": int(payoff_doc.get("i", 1)),
                "j": int(payoff_doc.get("j", len(marginals))),
            }
        elif name == "asian_call":
            _check_keys(payoff_doc, {"builtin", "strike"}, {"builtin", "strike"}, "payoff")
            payoff_spec = {"builtin": "asian_call", "strike": _number(payoff_doc["strike"], "payoff.strike")}
        elif name == "vanilla":
            _check_keys(payoff_doc, {"builtin", "maturity", "knots", "values"},
                        {"builtin", "maturity", "knots", "values"}, "payoff")
            payoff_spec = {
                "builtin": "vanilla",
                "maturity": int(payoff_doc["maturity"]),
                "knots": _number_list(payoff_doc["knots"], "payoff.knots"),
                "values": _number_list(payoff_doc["values"], "payoff.values"),
            }
        elif name == "lookback":
            _check_keys(payoff_doc, {"builtin"}, {"builtin"}, "payoff")
            payoff_spec = {"builtin": "lookback"}
        else:
            raise errors.ParseError(f"payoff: unknown builtin {name!r}")
    else:
        raise errors.ParseError("payoff: need builtin or table")

    x = _number(doc.get("x", 0.0), "x") if "x" in doc else 0.0

    solver = doc.get("solver", {})
    _check_keys(solver, {"seed", "tolerance", "max_paths"}, set(), "solver")
    seed = solver.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise errors.ParseError("solver.seed: expected an integer")
    tolerance = _number(solver.get("tolerance", 1e-9), "solver.tolerance")
    max_paths = solver.get("max_paths", 10**6)
    if isinstance(max_paths, bool) or not isinstance(max_paths, int) or max_paths < 1:
        raise errors.ParseError("solver.max_paths: expected a positive integer")
    try:
        opts = SolveOptions(tolerance=tolerance, seed=seed)
    except ValueError as exc:
        raise errors.ParseError(f"solver: {exc}") from exc

    return Instance(
        sys=system,
        prior_specs=prior_specs,
        utility=utility,
        payoff_spec=payoff_spec,
        x=x,
        opts=opts,
        max_paths=max_paths,
    )


def load_instance(path: str) -> Instance:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise errors.ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise errors.ParseError(f"{path}: invalid JSON: {exc}") from exc
    return parse_instance(doc)


def build_priors(instance: Instance, lattice: PathLattice) -> AmbiguitySet:
    priors = []
    for i, spec in enumerate(instance.prior_specs):
        if "weights" in spec:
            w = np.asarray(spec["weights"], dtype=float)
            if w.shape != (lattice.n_paths,):
                raise errors.ParseError(
                    f"priors[{i}]: weight vector length {w.size} does not match "
                    f"path count {lattice.n_paths}"
                )
            if np.any(w < 0):
                raise errors.ParseError(f"priors[{i}]: negative weights")
            total = w.sum()
            if total <= 0:
                raise errors.ParseError(f"priors[{i}]: zero total mass")
            priors.append(PathMeasure(lattice, w / total))
        elif spec["name"] == "uniform":
            priors.append(PathMeasure(lattice, np.full(lattice.n_paths, 1.0 / lattice.n_paths)))
        else:
            w = np.ones(lattice.n_paths)
            for t, marg in enumerate(instance.sys.marginals):
                w *= marg.pmf[lattice.path_index[:, t]]
            if spec["name"] == "tilted":
                w = w * np.exp(spec["theta"] * lattice.paths.sum(axis=1))
            priors.append(PathMeasure(lattice, w / w.sum()))
    return AmbiguitySet(priors)


def build_payoff(instance: Instance, lattice: PathLattice) -> Payoff:
    spec = instance.payoff_spec
    if "table" in spec:
        if len(spec["table"]) != lattice.n_paths:
            raise errors.ParseError(
                f"payoff.table length {len(spec['table'])} does not match "
                f"path count {lattice.n_paths} (lexicographic path order)"
            )
        return payoff_table(lattice, spec["table"])
    name = spec["builtin"]
    try:
        if name == "forward":
            return payoff_forward(lattice)
        if name == "straddle":
            return payoff_straddle(lattice, spec["i"], spec["j"])
        if name == "asian_call":
            return payoff_asian_call(lattice, spec["strike"])
        if name == "vanilla":
            return payoff_vanilla(lattice, spec["maturity"], spec["knots"], spec["values"])
        if name == "lookback":
            return payoff_lookback(lattice)
    except ValueError as exc:
        raise errors.ParseError(f"payoff: {exc}") from exc
    raise errors.ParseError(f"payoff: unknown builtin {name!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _doc_header(command: str, opts: SolveOptions) -> Dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": opts.seed}


def cmd_validate(instance: Instance) -> (dict, int):
    """Convex-order check cross-checked against polytope feasibility."""
    verdict = check_strassen(instance.sys)
    poly = build_polytope(instance.sys, max_paths=instance.max_paths)
    lp_verdict = feasibility(poly, instance.opts)
    doc = _doc_header("validate", instance.opts)
    doc.update(
        {
            "feasible": bool(verdict.feasible),
            "marginal_means": list(verdict.means),
            "violation": list(verdict.violation) if verdict.violation else None,
            "n_paths": poly.lattice.n_paths,
            "n_rows": poly.n_rows,
            "lp_feasible": bool(lp_verdict.feasible),
            "checks_agree": bool(verdict.feasible == lp_verdict.feasible),
        }
    )
    code = _EXIT_OK if (verdict.feasible and lp_verdict.feasible) else _EXIT_DOMAIN
    return doc, code


def cmd_mot(instance: Instance) -> (dict, int):
    poly = build_polytope(instance.sys, max_paths=instance.max_paths)
    psi = build_payoff(instance, poly.lattice)
    bounds = mot_bounds(poly, psi, instance.opts)
    doc = _doc_header("mot", instance.opts)
    doc.update(
        {
            "payoff": psi.name,
            "mot_low": bounds.low,
            "mot_high": bounds.high,
            "argmin_weights": bounds.argmin.weights.tolist(),
            "argmax_weights": bounds.argmax.weights.tolist(),
        }
    )
    return doc, _EXIT_OK


def cmd_price(instance: Instance) -> (dict, int):
    poly = build_polytope(instance.sys, max_paths=instance.max_paths)
    amb = build_priors(instance, poly.lattice)
    psi = build_payoff(instance, poly.lattice)
    report = price_report(
        instance.sys, amb, instance.utility, psi, instance.x, poly, instance.opts
    )
    doc = _doc_header("price", instance.opts)
    doc.update(
        {
            "x": instance.x,
            "utility": instance.utility.kind,
            "utility_params": dict(instance.utility.params),
            "payoff": psi.name,
            "mot_low": report.mot_low,
            "mot_high": report.mot_high,
            "u_psi_at_x": report.u_psi_at_x,
            "dual": {
                "lambda": report.dual.lam,
                "value": report.dual.value,
                "gap_certificate": report.dual.gap,
                "lambda_on_edge": report.dual.lambda_on_edge,
                "converged": report.dual.converged,
                "mixture_weights": report.dual.weights.tolist(),
                "q_weights": report.dual.q.weights.tolist(),
            },
            "primal": {
                "value": report.primal.value,
                "smoothed_value": report.primal.smoothed_value,
                "iterations": report.primal.iterations,
                "dynamic": report.primal.dynamic.values.tolist(),
                "static": [v.tolist() for v in report.primal.static.vectors],
            },
            "duality_gap": report.duality_gap,
            "relative_gap": report.relative_gap,
            "p_sell": report.p_sell,
            "p_buy": report.p_buy,
            "indifference": {
                "u0": report.prices.u0,
                "sell_route_penalized": report.prices.sell_route_penalized,
                "sell_route_bisection": report.prices.sell_route_bisection,
                "buy_route_penalized": report.prices.buy_route_penalized,
                "buy_route_bisection": report.prices.buy_route_bisection,
                "cross_check_tolerance": report.prices.cross_check_tolerance,
                "fallback_used": report.prices.fallback_used,
            },
            "scale": report.scale,
            "diagnostics": report.diagnostics,
        }
    )
    return doc, _EXIT_OK


_VERIFY_MAX_CONJUGACY_PATHS = 64


def cmd_verify(instance: Instance) -> (dict, int):
    """Property suite: conjugacy, weak duality, sandwich, trivial case."""
    poly = build_polytope(instance.sys, max_paths=instance.max_paths)
    lattice = poly.lattice
    if lattice.n_paths > _VERIFY_MAX_CONJUGACY_PATHS:
        raise errors.HarnessLimit(
            f"verify harness requires <= {_VERIFY_MAX_CONJUGACY_PATHS} paths, "
            f"instance has {lattice.n_paths}"
        )
    amb = build_priors(instance, lattice)
    psi = build_payoff(instance, lattice)
    opts = instance.opts
    properties = []

    a = instance.utility.param_dict.get("a", 1.0)
    for label, spec in (
        ("conjugacy_quadratic", quadratic_integrand()),
        ("conjugacy_exponential_pair", exponential_integrand(a)),
        ("conjugacy_quadratic_shifted", quadratic_integrand().with_shift(psi.values)),
    ):
        rep = conjugacy_check(spec, amb, trial_count=6, seed=opts.seed)
        properties.append(
            {
                "name": label,
                "passed": bool(rep.max_residual <= 1e-4 and rep.negative_mass_rejected),
                "residual": rep.max_residual,
            }
        )

    violation = weak_duality_max_violation(
        instance.sys, poly, amb, instance.utility, psi, instance.x,
        seed=opts.seed, n_samples=24,
    )
    properties.append(
        {"name": "weak_duality", "passed": bool(violation <= 1e-9), "residual": violation}
    )

    bounds = mot_bounds(poly, psi, opts)
    from .pricing import indifference_prices

    prices = indifference_prices(psi, amb, instance.utility, poly, 0.0, opts, bounds=bounds)
    sandwich_res = max(
        bounds.low - prices.p_buy, prices.p_buy - prices.p_sell, prices.p_sell - bounds.high
    )
    properties.append(
        {"name": "sandwich", "passed": bool(sandwich_res <= 1e-6), "residual": sandwich_res}
    )

    trivial_doc = {"name": "trivial_case", "passed": True, "residual": 0.0, "skipped": False}
    try:
        rep = trivial_case_check(
            instance.sys, lambda lat: build_payoff(instance, lat), opts
        )
        trivial_doc["residual"] = max(rep.sell_residual, rep.buy_residual)
    except errors.HarnessLimit:
        trivial_doc["skipped"] = True
    except errors.CrossCheckFailed as exc:
        trivial_doc["passed"] = False
        trivial_doc["detail"] = str(exc)
    properties.append(trivial_doc)

    doc = _doc_header("verify", instance.opts)
    doc["properties"] = properties
    doc["all_passed"] = bool(all(p["passed"] for p in properties))
    return doc, (_EXIT_OK if doc["all_passed"] else _EXIT_DOMAIN)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _emit(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        _sys.stdout.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="semistatic",
        description="Calibrated pricing bounds and robust-utility indifference prices "
                    "on discrete path lattices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate", "check calibration feasibility (convex order + polytope LP)"),
        ("price", "full valuation report"),
        ("mot", "model-free expectation bounds only"),
        ("verify", "run the numerical property suite"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("instance", help="path to a JSON instance file")
        p.add_argument("--seed", type=int, default=None, help="override solver seed")
        p.add_argument("--tol", type=float, default=None, help="override solver tolerance")
        p.add_argument("--max-paths", type=int, default=None, help="override the path cap")
        p.add_argument("--out", default=None, help="write the report to a file")
    args = parser.parse_args(argv)

    try:
        instance = load_instance(args.instance)
        if args.seed is not None or args.tol is not None:
            instance.opts = SolveOptions(
                tolerance=args.tol if args.tol is not None else instance.opts.tolerance,
                seed=args.seed if args.seed is not None else instance.opts.seed,
            )
        if args.max_paths is not None:
            instance.max_paths = args.max_paths
        handler = {
            "validate": cmd_validate,
            "price": cmd_price,
            "mot": cmd_mot,
            "verify": cmd_verify,
        }[args.command]
        doc, code = handler(instance)
        _emit(doc, args.out)
        return code
    except errors.ParseError as exc:
        print(f"parse error: {exc}", file=_sys.stderr)
        return _EXIT_PARSE
    except (errors.SizeLimit, errors.HarnessLimit) as exc:
        print(f"limit: {exc}", file=_sys.stderr)
        return _EXIT_LIMIT
    except errors.SemistaticError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return _EXIT_DOMAIN


if __name__ == "__main__":
    raise SystemExit(main())
