"""Utility pairs, robust integrals, divergences, penalty and conjugacy harness."""
from __future__ import annotations

import math

import numpy as np
import pytest

from semistatic.divergence import (
    AmbiguitySet,
    RobustDivergenceOracle,
    conjugacy_check,
    divergence_robust,
    divergence_single,
    entropic_quadratic_utility,
    exponential_integrand,
    exponential_utility,
    gamma_penalty,
    quadratic_integrand,
    relative_entropy_integrand,
    robust_integral,
    utility_integrand,
)
from semistatic.errors import DivergenceInfinite, HarnessLimit
from semistatic.market import Grid, Marginal, MarginalSystem
from semistatic.optimize import SolveOptions, minimize_convex_1d
from semistatic.polytope import PathMeasure, build_lattice
from semistatic.pricing import payoff_straddle


@pytest.fixture
def six_path(unique_sys, unique_coupling):
    lat = unique_coupling.lattice
    uniform = PathMeasure(lat, np.full(6, 1.0 / 6.0))
    product = PathMeasure(lat, np.outer([0.5, 0.5], [0.25, 0.5, 0.25]).ravel())
    return lat, unique_coupling, uniform, product


class TestUtilities:
    @pytest.mark.parametrize("util", [exponential_utility(1.0), exponential_utility(2.5),
                                      entropic_quadratic_utility(0.5),
                                      entropic_quadratic_utility(2.0)])
    def test_youngs_inequality(self, util):
        xs = np.linspace(-4.0, 4.0, 17)
        ys = np.concatenate([[1e-6], np.linspace(0.05, 6.0, 24)])
        for x in xs:
            lhs = util.u(np.array([x]))[0]
            rhs = util.v(ys) + x * ys
            assert np.all(lhs <= rhs + 1e-10)

    @pytest.mark.parametrize("util,left", [(exponential_utility(1.0), -30.0),
                                           (entropic_quadratic_utility(0.7), -1e7)])
    def test_marginal_utility_limits(self, util, left):
        # steep on the far left, flat on the far right
        assert util.u_prime(np.array([left]))[0] > 1e3
        assert util.u_prime(np.array([1e3]))[0] < 1e-3
        xs = np.linspace(-5, 5, 50)
        up = util.u_prime(xs)
        assert np.all(np.diff(up) < 0)  # strict concavity

    def test_exponential_closed_forms(self):
        util = exponential_utility(2.0)
        y = np.array([0.0, 0.5, 1.0, 3.0])
        np.testing.assert_allclose(util.v(y), (np.where(y > 0, y * np.log(np.maximum(y, 1e-300)), 0.0) - y) / 2.0, atol=1e-14)
        assert util.v(np.array([1.0]))[0] == pytest.approx(-0.5)
        assert np.isinf(util.v(np.array([-0.1]))[0])

    def test_eq_conjugate_consistency(self):
        # V(y) = sup_x (U(x) - x y) recovered numerically from the Newton-based U
        util = entropic_quadratic_utility(0.5)
        xs = np.linspace(-25.0, 25.0, 400001)
        for y in (0.3, 1.0, 2.5):
            direct = util.v(np.array([y]))[0]
            numeric = float(np.max(util.u(xs) - xs * y))
            assert direct == pytest.approx(numeric, abs=5e-8)

    def test_eq_uprime_is_minimizer(self):
        util = entropic_quadratic_utility(1.3)
        xs = np.array([-3.0, 0.0, 2.0])
        y = util.u_prime(xs)
        # stationarity of V(y) + x y
        resid = np.log(y) + 2 * 1.3 * y + xs
        assert np.max(np.abs(resid)) < 1e-10


class TestRobustIntegral:
    def test_zero(self, six_path):
        lat, q, uniform, product = six_path
        spec = quadratic_integrand()
        amb = AmbiguitySet([uniform, product])
        assert robust_integral(np.zeros(6), spec, amb) == 0.0

    def test_constant(self, six_path):
        lat, q, uniform, product = six_path
        spec = quadratic_integrand()
        amb = AmbiguitySet([uniform, product])
        assert robust_integral(np.ones(6), spec, amb) == pytest.approx(0.5)

    def test_step_function_two_priors(self, six_path):
        lat, q, uniform, product = six_path
        spec = exponential_integrand(1.0)
        amb = AmbiguitySet([uniform, product])
        f = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
        direct = max(float(uniform.weights @ np.exp(f)), float(product.weights @ np.exp(f)))
        assert robust_integral(f, spec, amb) == pytest.approx(direct, abs=1e-14)


class TestDivergenceSingle:
    def test_density_one(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        val = divergence_single(uniform, uniform, spec)
        assert val == pytest.approx(-1.0, abs=1e-14)  # V(1) = -1

    def test_scaled_reference(self, six_path):
        # scaling the measure by lam costs lam log lam - lam at zero entropy
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        for lam in (0.3, 1.7):
            scaled = PathMeasure(lat, lam * uniform.weights)
            val = divergence_single(scaled, uniform, spec)
            assert val == pytest.approx(lam * math.log(lam) - lam, abs=1e-12)

    def test_scaled_coupling_identity(self, six_path):
        # full closed form: scaled divergence = lam*entropy + lam log lam - lam
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        ent = math.log(1.5)
        for lam in (0.25, 1.0, 2.0):
            scaled = PathMeasure(lat, lam * q.weights)
            val = divergence_single(scaled, uniform, spec)
            assert val == pytest.approx(lam * ent + lam * math.log(lam) - lam, abs=1e-12)

    def test_support_violation(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        assert divergence_single(uniform, q, spec) == math.inf

    def test_shifted_conjugate_identity(self, six_path):
        # divergence with shifted base = plain divergence - measure(shift)
        lat, q, uniform, product = six_path
        shift = payoff_straddle(lat, 1, 2).values
        spec = exponential_integrand(1.0)
        shifted = spec.with_shift(shift)
        for nu in (q, uniform, product):
            lhs = divergence_single(nu, uniform, shifted)
            rhs = divergence_single(nu, uniform, spec) - float(nu.weights @ shift)
            assert lhs == pytest.approx(rhs, abs=1e-12)


class TestDivergenceRobust:
    def test_singleton_equals_single(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([uniform])
        val, w = divergence_robust(q, amb, spec)
        assert val == pytest.approx(divergence_single(q, uniform, spec), abs=1e-12)
        assert w.tolist() == [1.0]

    def test_duplicated_prior(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([uniform, uniform])
        val, _ = divergence_robust(q, amb, spec)
        assert val == pytest.approx(divergence_single(q, uniform, spec), abs=1e-10)

    def test_entropy_part_of_unique_coupling(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([uniform])
        val, _ = divergence_robust(q, amb, spec)
        assert val == pytest.approx(math.log(1.5) - 1.0, abs=1e-12)

    def test_two_priors_vs_grid_oracle(self, six_path):
        lat, q, uniform, product = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([uniform, product])
        val, w = divergence_robust(q, amb, spec)
        pmat = np.array([uniform.weights, product.weights])

        def direct(t):
            p = t * pmat[0] + (1 - t) * pmat[1]
            mask = q.weights > 0
            r = q.weights[mask] / p[mask]
            return float(p[mask] @ (r * np.log(r) - r))

        ts = np.linspace(0.0, 1.0, 4001)
        t0 = ts[int(np.argmin([direct(t) for t in ts]))]
        _, oracle = minimize_convex_1d(
            direct, (max(t0 - 0.01, 0.0), min(t0 + 0.01, 1.0)), SolveOptions(tolerance=1e-12)
        )
        assert val == pytest.approx(oracle, abs=1e-6)

    def test_not_dominated(self, six_path):
        lat, q, uniform, _ = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([q])  # support excludes two paths
        val, _ = divergence_robust(uniform, amb, spec)
        assert val == math.inf

    def test_convexity_midpoint(self, six_path):
        lat, q, uniform, product = six_path
        spec = utility_integrand(exponential_utility(1.0))
        amb = AmbiguitySet([uniform, product])
        rng = np.random.default_rng(1)
        for _ in range(6):
            a = rng.random(6) * uniform.weights
            b = rng.random(6) * uniform.weights
            mid = PathMeasure(lat, 0.5 * (a + b))
            va, _ = divergence_robust(PathMeasure(lat, a), amb, spec)
            vb, _ = divergence_robust(PathMeasure(lat, b), amb, spec)
            vm, _ = divergence_robust(mid, amb, spec)
            assert vm <= 0.5 * (va + vb) + 1e-8

    def test_young_inequality_sampled(self, six_path):
        lat, q, uniform, product = six_path
        spec = exponential_integrand(1.0)
        amb = AmbiguitySet([uniform, product])
        rng = np.random.default_rng(4)
        for _ in range(10):
            f = rng.normal(size=6)
            nu = rng.random(6) * uniform.weights
            lhs = float(nu @ f)
            jv, _ = divergence_robust(PathMeasure(lat, nu), amb, spec)
            rhs = robust_integral(f, spec, amb) + jv
            assert lhs <= rhs + 1e-9


class TestGammaPenalty:
    def test_vanishes_at_prior(self, six_path):
        # singleton hull that is itself calibrated: no-claim value is U(0) = -1
        lat = build_lattice(MarginalSystem(0.0, (
            Marginal(Grid([-1.0, 1.0]), [0.5, 0.5]),
            Marginal(Grid([-1.0, 1.0]), [0.5, 0.5]),
        )))
        # the diagonal coupling x2 = x1 is a martingale measure
        w = np.array([0.5, 0.0, 0.0, 0.5])
        prior = PathMeasure(lat, w)
        amb = AmbiguitySet([prior])
        res = gamma_penalty(prior, amb, exponential_utility(1.0), -1.0)
        assert res.value == pytest.approx(0.0, abs=1e-9)
        assert res.lam == pytest.approx(1.0, abs=1e-5)

    def test_six_path_coupling(self, six_path):
        lat, q, uniform, _ = six_path
        amb = AmbiguitySet([uniform])
        res = gamma_penalty(q, amb, exponential_utility(1.0), -2.0 / 3.0)
        assert res.value == pytest.approx(0.0, abs=1e-9)
        assert res.lam == pytest.approx(2.0 / 3.0, abs=1e-5)

    def test_singular_measure_raises(self, six_path):
        lat, q, uniform, _ = six_path
        amb = AmbiguitySet([q])
        with pytest.raises(DivergenceInfinite):
            gamma_penalty(uniform, amb, exponential_utility(1.0), -1.0)

    def test_exponential_closed_form_on_polytope(self, six_path):
        # for exponential utility the penalty equals
        # (robust entropy - no-claim entropy level) / a  on calibrated measures
        lat, q, uniform, product = six_path
        amb = AmbiguitySet([uniform, product])
        a = 1.0
        ent_oracle = RobustDivergenceOracle(amb, relative_entropy_integrand())
        ent_min = ent_oracle.value(q.weights)  # unique calibrated measure
        u0 = -math.exp(-ent_min) / a
        for lam_mix in (1.0,):
            res = gamma_penalty(q, amb, exponential_utility(a), u0)
            expect = (ent_oracle.value(q.weights) - ent_min) / a
            assert res.value == pytest.approx(expect, abs=1e-8)


class TestConjugacyHarness:
    def test_classical_quadratic_pair(self):
        # two equally likely states, measure = the prior: conjugate value 1/2
        lat = build_lattice(MarginalSystem(0.0, (Marginal(Grid([-1.0, 1.0]), [0.5, 0.5]),)))
        prior = PathMeasure(lat, np.array([0.5, 0.5]))
        amb = AmbiguitySet([prior])
        oracle = RobustDivergenceOracle(amb, quadratic_integrand())
        assert oracle.value(prior.weights) == pytest.approx(0.5, abs=1e-14)

    def test_constant_functions(self, six_path):
        lat, q, uniform, product = six_path
        amb = AmbiguitySet([uniform, product])
        for spec in (quadratic_integrand(), exponential_integrand(1.0)):
            for c in (-1.0, 0.0, 2.0):
                val = robust_integral(np.full(6, c), spec, amb)
                assert val == pytest.approx(spec.phi(np.array([c]))[0], abs=1e-14)

    def test_harness_limit(self):
        pts = np.arange(9.0)
        m = Marginal(Grid(pts), np.full(9, 1.0 / 9.0))
        sys = MarginalSystem(4.0, (m, m))
        lat = build_lattice(sys)
        prior = PathMeasure(lat, np.full(81, 1.0 / 81.0))
        with pytest.raises(HarnessLimit):
            conjugacy_check(quadratic_integrand(), AmbiguitySet([prior]), 2, 0)

    def test_full_check_singleton(self, six_path):
        lat, q, uniform, _ = six_path
        rep = conjugacy_check(exponential_integrand(1.0), AmbiguitySet([uniform]), 4, seed=1)
        assert rep.max_residual <= 1e-4
        assert rep.negative_mass_rejected

    def test_full_check_two_priors_shifted(self, six_path):
        lat, q, uniform, product = six_path
        shift = payoff_straddle(lat, 1, 2).values
        rep = conjugacy_check(
            quadratic_integrand().with_shift(shift),
            AmbiguitySet([uniform, product]), 4, seed=2,
        )
        assert rep.max_residual <= 1e-4
