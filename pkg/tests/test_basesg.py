"""Oracle tests for the translation-invariant base semigroups.

Closed forms used here: the Gaussian kernel with variance 2t for the heat
exponent, the exact Cauchy density t/(pi (x^2 + t^2)), the Laplace
transform (1 - exp(-sqrt(lam)))/lam of T(t) applied to the indicator of
[-1, 1] evaluated at 0 (heat base), and the stable density at the origin
Gamma(1 + 1/alpha)/pi.
"""

import math

import numpy as np
import pytest

from semipert.basesg import BaseSemigroup, LevyExponent, build_base, estimate_regularity
from semipert.gridfn import default_grid, indicator, make_grid, one, sup_norm


@pytest.fixture(scope="module")
def grid():
    return default_grid(1024)


@pytest.fixture(scope="module")
def heat(grid):
    return build_base(LevyExponent.heat(), grid)


@pytest.fixture(scope="module")
def cauchy(grid):
    return build_base(LevyExponent.cauchy(), grid)


class TestExponent:
    def test_heat_psi(self):
        e = LevyExponent.heat()
        np.testing.assert_allclose(e.psi(np.array([2.0])), 4.0 + 0j)

    def test_stable_range(self):
        with pytest.raises(ValueError):
            LevyExponent.stable(0.3)
        with pytest.raises(ValueError):
            LevyExponent.stable(2.5)

    def test_conjugate_symmetry_enforced(self):
        bad = LevyExponent.custom(lambda xi: 1j * xi + xi**2)  # psi(-xi) != conj
        bad2 = LevyExponent.custom(lambda xi: -(xi**2))
        g = make_grid(-10.0, 10.0, 64)
        with pytest.raises(ValueError):
            build_base(LevyExponent.custom(lambda xi: 1j * np.abs(xi) + xi**2), g)
        with pytest.raises(ValueError):
            build_base(bad2, g)
        del bad

    def test_growth_check_rejects_logarithmic_symbol(self):
        # log(1 + xi^2) grows like 2 log|xi|: smoothing-rate check must fail
        g = make_grid(-10.0, 10.0, 64)
        with pytest.raises(ValueError):
            build_base(LevyExponent.custom(lambda xi: np.log1p(xi**2)), g)

    def test_rho_max(self):
        assert LevyExponent.heat().rho_max == 2.0
        assert LevyExponent.stable(1.5).rho_max == 1.5


class TestHeatKernel:
    def test_kernel_is_gaussian(self, heat, grid):
        t = 0.3
        tab = heat.kernel_table(t)
        d = grid.displacements()
        np.testing.assert_allclose(
            tab.values, np.exp(-(d**2) / (4 * t)) / math.sqrt(4 * math.pi * t), atol=1e-14)

    def test_mass_and_variance(self, heat, grid):
        for t in (1e-5, 1e-3, 0.05, 1.0):
            tab = heat.kernel_table(t)
            assert tab.values.min() >= 0.0
            assert tab.mass(grid.h) == pytest.approx(1.0, abs=1e-9)
        tab = heat.kernel_table(0.3)
        var = grid.h * (grid.displacements() ** 2 * tab.values).sum()
        assert var == pytest.approx(0.6, rel=1e-6)

    def test_indicator_smoothing_matches_erf(self, heat, grid):
        f = indicator(grid, -1.0, 1.0)
        out = heat.apply(0.25, f)
        got = out.eval_at(np.array([0.0]))[0]
        assert got == pytest.approx(math.erf(1.0), abs=5e-4)

    def test_resolvent_closed_form(self, heat, grid):
        f = indicator(grid, -1.0, 1.0)
        for lam in (1.0, 2.0, 10.0):
            r = heat.resolvent(lam, f)
            exact = (1.0 - math.exp(-math.sqrt(lam))) / lam
            assert r.eval_at(np.array([0.0]))[0] == pytest.approx(exact, abs=3e-4)

    def test_chapman_consistency(self, heat):
        assert heat.chapman_defect(0.05, 0.05) < 1e-12
        assert heat.chapman_defect(0.1, 0.4) < 1e-12


class TestCauchyKernel:
    def test_density_closed_form(self, cauchy, grid):
        tab = cauchy.kernel_table(1.0)
        d = grid.displacements()
        np.testing.assert_allclose(tab.values, 1.0 / (math.pi * (1.0 + d**2)), atol=1e-9)

    def test_half_mass_on_unit_interval(self, cauchy, grid):
        # int_{-1}^{1} p_1 = (2/pi) arctan(1) = 1/2
        f = indicator(grid, -1.0, 1.0)
        out = cauchy.apply(1.0, f)
        assert out.eval_at(np.array([0.0]))[0] == pytest.approx(0.5, abs=5e-4)

    def test_gradient_mass_decay(self, cauchy, grid):
        # int |p_t'| = 2/(pi t); window truncation costs O((t/20)^2)
        tab = cauchy.kernel_table(1.0)
        tv = np.abs(np.gradient(tab.values, grid.h)).sum() * grid.h
        assert tv == pytest.approx(2.0 / math.pi, rel=5e-3)

    def test_small_time_tables_conserve_mass(self, cauchy, grid):
        for t in (1e-6, 1e-3, 0.05):
            tab = cauchy.kernel_table(t)
            assert not tab.pointwise
            assert tab.values.min() >= 0.0
            assert tab.mass(grid.h) == pytest.approx(1.0, abs=1e-12)

    def test_chapman_consistency_resolved(self, cauchy):
        assert cauchy.chapman_defect(0.15, 0.15) < 1e-6
        assert cauchy.chapman_defect(0.3, 0.5) < 1e-6


class TestStableKernel:
    def test_alpha_two_equals_heat(self, heat, grid):
        b2 = build_base(LevyExponent.stable(2.0), grid)
        for t in (0.01, 0.3):
            np.testing.assert_allclose(
                b2.kernel_table(t).values, heat.kernel_table(t).values, atol=1e-9)

    def test_density_at_origin(self, grid):
        b = build_base(LevyExponent.stable(1.5), grid)
        tab = b.kernel_table(1.0)
        assert tab.values[grid.n - 1] == pytest.approx(
            math.gamma(1.0 + 1.0 / 1.5) / math.pi, abs=1e-8)

    def test_scaling_relation(self, grid):
        # p_t(0) = t^(-1/alpha) p_1(0)
        b = build_base(LevyExponent.stable(1.5), grid)
        p1 = b.kernel_table(1.0).values[grid.n - 1]
        p3 = b.kernel_table(3.0).values[grid.n - 1]
        assert p3 == pytest.approx(p1 * 3.0 ** (-1.0 / 1.5), rel=1e-9)

    def test_mass_sub_markov_everywhere(self, grid):
        b = build_base(LevyExponent.stable(1.5), grid)
        for t in (1e-8, 1e-4, 0.05, 2.0):
            tab = b.kernel_table(t)
            m = tab.mass(grid.h)
            assert m <= 1.0 + 1e-6
            assert m == pytest.approx(1.0, abs=1e-6)

    def test_contraction_assertion(self, grid):
        b = build_base(LevyExponent.stable(1.5), grid)
        f = indicator(grid, -2.0, 2.0)
        out = b.apply(0.7, f)
        assert sup_norm(out) <= 1.0 + 1e-9


class TestCustomExponent:
    def test_killed_heat_loses_mass_exponentially(self, grid):
        kappa = 0.3
        b = build_base(LevyExponent.custom(lambda xi: xi**2 + kappa), grid)
        out = b.apply(0.5, one(grid))
        np.testing.assert_allclose(out.values, math.exp(-kappa * 0.5), atol=1e-9)

    def test_matches_heat_when_psi_is_square(self, heat, grid):
        b = build_base(LevyExponent.custom(lambda xi: xi**2 + 0j), grid)
        f = indicator(grid, -1.0, 1.0)
        np.testing.assert_allclose(
            b.apply(0.5, f).values, heat.apply(0.5, f).values, atol=1e-9)

    def test_unresolvable_time_raises(self, grid):
        b = build_base(LevyExponent.custom(lambda xi: xi**2 + 0j), grid)
        with pytest.raises(ValueError):
            b.kernel_table(1e-6)


class TestRegularity:
    def test_heat_gradient_blowup_rate(self, heat):
        fit = estimate_regularity(heat, 1.0, [0.01, 0.02, 0.04, 0.08, 0.16, 0.32, 0.64])
        assert fit["exponent"] == pytest.approx(-0.5, abs=0.05)

    def test_cauchy_gradient_blowup_rate(self):
        g = make_grid(-20.0, 20.0, 2048)
        b = build_base(LevyExponent.cauchy(), g)
        fit = estimate_regularity(b, 1.0, [0.064, 0.128, 0.256, 0.512])
        assert fit["exponent"] == pytest.approx(-1.0, abs=0.05)

    def test_seminorms_decrease_with_time(self, heat):
        fit = estimate_regularity(heat, 1.0, [0.05, 0.1, 0.2])
        assert fit["seminorms"][0] > fit["seminorms"][1] > fit["seminorms"][2]

    def test_phi_majorant_covers_measured_norms(self, heat):
        fit = estimate_regularity(heat, 1.0, [0.02, 0.1, 0.5])
        for t, nrm in zip(fit["times"], fit["norms"]):
            assert heat.phi(t, 1.0) >= 0.9 * nrm


def test_resolvent_requires_positive_lambda():
    g = default_grid(256)
    b = build_base(LevyExponent.heat(), g)
    with pytest.raises(ValueError):
        b.resolvent(-1.0, one(g))
