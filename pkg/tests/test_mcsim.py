"""Euler--Maruyama simulator: sampler laws, determinism, engine agreement.

Closed-form targets:
  * driver variance at alpha = 2 is 2 (characteristic function e^{-xi^2});
  * Cauchy CDF: P(X <= 1) = 3/4 for the alpha = 1 unit variate;
  * b = 0 Brownian paths give Var X_1 = 2, so E[min(X_1^2, 100)] ~ 2;
  * kappa_n = kappa (1 + 1/n) on a pure-noise SDE changes E[X_1^2] by
    2[(1 + 1/n)^2 - 1], which the common-seed study should resolve.
All seeds are fixed, so every assertion below is deterministic.
"""

import dataclasses

import numpy as np
import pytest

from semipert import dyson
from semipert.basesg import LevyExponent, build_base
from semipert.gridfn import Extension, GridFunction, bump, default_grid, indicator, one
from semipert.levyop import LevyCharacteristics
from semipert.mcsim import (
    Brownian,
    CompoundPoisson,
    MCResult,
    SdeSpec,
    Secondary,
    Stable,
    compare_mc_pde,
    sample_stable,
    simulate_sde,
    weak_convergence_study,
)

ZERO = lambda x: 0.0 * x
ONES = lambda x: np.ones_like(x)


@pytest.fixture(scope="module")
def grid():
    return default_grid(256)


@pytest.fixture(scope="module")
def uniforms():
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(7)))
    u = g.random((2, 200_000))
    return np.maximum(u, 2.0 ** -54)


@pytest.fixture(scope="module")
def f_clamped_square(grid):
    return GridFunction(grid, np.minimum(grid.nodes() ** 2, 100.0),
                        Extension.CONSTANT)


class TestSampler:
    def test_gaussian_reduction_has_variance_two(self, uniforms):
        z = sample_stable(2.0, uniforms[0], uniforms[1])
        se = np.sqrt((z ** 2).var(ddof=1) / z.size)
        assert abs(z.var(ddof=1) - 2.0) <= 3.0 * se
        assert abs(z.mean()) <= 3.0 * z.std(ddof=1) / np.sqrt(z.size)

    def test_cauchy_cdf_at_one(self, uniforms):
        z = sample_stable(1.0, uniforms[0], uniforms[1])
        p = np.mean(z <= 1.0)
        assert abs(p - 0.75) <= 3.0 * np.sqrt(0.75 * 0.25 / z.size)

    def test_heavy_tail_is_symmetric(self, uniforms):
        z = sample_stable(0.5, uniforms[0], uniforms[1])
        p = np.mean(z <= 0.0)
        assert abs(p - 0.5) <= 3.0 * np.sqrt(0.25 / z.size)

    def test_scalar_in_scalar_out(self):
        out = sample_stable(1.5, 0.3, 0.7)
        assert isinstance(out, float)

    @pytest.mark.parametrize("alpha", [0.0, -0.5, 2.5])
    def test_index_range_enforced(self, alpha):
        with pytest.raises(ValueError):
            sample_stable(alpha, 0.5, 0.5)

    @pytest.mark.parametrize("u1,u2", [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0)])
    def test_uniforms_must_be_interior(self, u1, u2):
        with pytest.raises(ValueError):
            sample_stable(1.5, u1, u2)


class TestSpecValidation:
    def base(self, **kw):
        args = dict(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                    t_end=1.0, dt=1e-2, n_paths=1000, seed=0)
        args.update(kw)
        return SdeSpec(**args)

    def test_accepts_valid_spec(self):
        assert self.base().n_steps == 100

    @pytest.mark.parametrize("kw", [
        {"dt": 0.0}, {"dt": -1e-3}, {"t_end": 0.0}, {"n_paths": 999},
        {"t_end": 1.0, "dt": 0.3},
    ])
    def test_rejects_bad_fields(self, kw):
        with pytest.raises(ValueError):
            self.base(**kw)

    def test_stable_index_checked_at_driver(self):
        with pytest.raises(ValueError):
            Stable(2.5)

    def test_result_must_be_finite(self):
        with pytest.raises(ValueError):
            MCResult(mean=np.nan, stderr=1.0, n=10, elapsed=0.0)


class TestSimulate:
    def test_brownian_second_moment(self, f_clamped_square):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       x0=0.0, t_end=1.0, dt=1e-2, n_paths=100_000, seed=11)
        r = simulate_sde(spec, f_clamped_square)
        assert abs(r.mean - 2.0) <= 3.0 * r.stderr
        assert r.n == 100_000 and r.elapsed > 0.0

    def test_unit_drift_moves_the_mean(self, grid):
        fx = GridFunction(grid, np.clip(grid.nodes(), -10, 10),
                          Extension.CONSTANT)
        spec = SdeSpec(drift=ONES, diffusion=ONES, primary_driver=Brownian(),
                       x0=0.0, t_end=1.0, dt=1e-2, n_paths=100_000, seed=3)
        r = simulate_sde(spec, fx)
        assert abs(r.mean - 1.0) <= 3.0 * r.stderr

    def test_cauchy_driver_puts_half_mass_in_unit_window(self, grid):
        spec = SdeSpec(drift=ZERO, diffusion=ONES,
                       primary_driver=Stable(1.0), x0=0.0, t_end=1.0,
                       dt=1e-3, n_paths=20_000, seed=5)
        r = simulate_sde(spec, indicator(grid, -1.0, 1.0))
        assert abs(r.mean - 0.5) <= 3.0 * r.stderr

    def test_rerun_is_bit_identical(self, grid):
        spec = SdeSpec(drift=lambda x: np.sign(x), diffusion=ONES,
                       primary_driver=Brownian(), x0=0.5, t_end=0.5,
                       dt=1e-2, n_paths=4000, seed=23)
        a = simulate_sde(spec, bump(grid))
        b = simulate_sde(spec, bump(grid))
        assert a.mean == b.mean and a.stderr == b.stderr

    def test_doubling_paths_shrinks_stderr_by_sqrt2(self, f_clamped_square):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       t_end=1.0, dt=1e-2, n_paths=50_000, seed=3)
        small = simulate_sde(spec, f_clamped_square)
        big = simulate_sde(dataclasses.replace(spec, n_paths=100_000),
                           f_clamped_square)
        ratio = small.stderr / big.stderr
        assert np.sqrt(2.0) * 0.9 <= ratio <= np.sqrt(2.0) * 1.1

    def test_per_path_values_match_summary(self, grid):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       t_end=0.1, dt=1e-2, n_paths=10_000, seed=1)
        r, vals = simulate_sde(spec, bump(grid), return_values=True)
        assert vals.shape == (10_000,)
        assert abs(vals.mean() - r.mean) <= 1e-12

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_exploding_coefficients_abort(self, grid):
        spec = SdeSpec(drift=lambda x: x ** 3, diffusion=ONES,
                       primary_driver=Brownian(), x0=10.0, t_end=4.0,
                       dt=0.5, n_paths=1000, seed=0)
        with pytest.raises(ArithmeticError, match="finite"):
            simulate_sde(spec, bump(grid))

    def test_secondary_cauchy_equals_primary_cauchy_in_law(self, grid):
        f = indicator(grid, -1.0, 1.0)
        primary = SdeSpec(drift=ZERO, diffusion=ONES,
                          primary_driver=Stable(1.0), t_end=1.0, dt=1e-2,
                          n_paths=50_000, seed=13)
        sec = SdeSpec(drift=ZERO, diffusion=ZERO, primary_driver=Brownian(),
                      t_end=1.0, dt=1e-2, n_paths=50_000, seed=14,
                      secondary=Secondary(kappa=ONES, driver=Stable(1.0)))
        a, b = simulate_sde(primary, f), simulate_sde(sec, f)
        assert abs(a.mean - b.mean) <= 3.0 * np.hypot(a.stderr, b.stderr)
        assert abs(b.mean - 0.5) <= 3.0 * b.stderr

    def test_compound_poisson_second_moment(self, grid):
        # rate * t * E[J^2] = 2 for rate 2, standard normal jumps, t = 1.
        f = GridFunction(grid, np.minimum(grid.nodes() ** 2, 400.0),
                         Extension.CONSTANT)
        driver = CompoundPoisson(rate=2.0,
                                 jump_law=lambda g, n: g.normal(0.0, 1.0, n))
        spec = SdeSpec(drift=ZERO, diffusion=ZERO, primary_driver=Brownian(),
                       t_end=1.0, dt=1e-2, n_paths=20_000, seed=9,
                       secondary=Secondary(kappa=ONES, driver=driver))
        r = simulate_sde(spec, f)
        assert abs(r.mean - 2.0) <= 3.0 * r.stderr


@pytest.fixture(scope="module")
def heat(grid):
    return build_base(LevyExponent.heat(), grid)


class TestEngineAgreement:
    def test_zero_perturbation_z_score(self, grid, heat):
        no_op = LevyCharacteristics(beta=0.5, mu_beta=0.0)
        f = bump(grid)
        evolved = dyson.duhamel_solve(no_op, heat, 1.0, f)
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       x0=0.5, t_end=1.0, dt=1e-2, n_paths=20_000, seed=29)
        out = compare_mc_pde(spec, f, evolved, 0.5)
        assert abs(out["z_score"]) <= 3.0  # measured -0.40
        rich = out["richardson"]
        assert rich["dt_half"] == spec.dt / 2.0
        assert rich["shift_sigma"] <= 3.0  # Euler is exact here; pure noise

    def test_constant_integrand_has_no_z_score(self, grid, heat):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       t_end=0.1, dt=1e-2, n_paths=1000, seed=0)
        with pytest.raises(ValueError, match="stderr"):
            compare_mc_pde(spec, one(grid), one(grid), 0.0)


class TestConvergenceStudy:
    def test_inflated_noise_scale_differences(self, f_clamped_square):
        def spec_for(scale):
            return SdeSpec(drift=ZERO,
                           diffusion=lambda x, s=scale: s * np.ones_like(x),
                           primary_driver=Brownian(), t_end=1.0, dt=1e-2,
                           n_paths=50_000, seed=17)

        seq = [spec_for(1.0 + 1.0 / n) for n in (2, 4, 8)] + [spec_for(1.0)]
        diffs = weak_convergence_study(seq, f_clamped_square)
        predicted = [2.0 * ((1.0 + 1.0 / n) ** 2 - 1.0) for n in (2, 4, 8)]
        assert diffs[0] > diffs[1] > diffs[2]
        for got, want in zip(diffs, predicted):
            assert abs(got - want) <= 0.05  # common seed cancels the noise

    def test_identical_specs_give_zero_differences(self, grid):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       t_end=0.1, dt=1e-2, n_paths=2000, seed=21)
        assert weak_convergence_study([spec, spec, spec], bump(grid)) == [0.0, 0.0]

    def test_needs_a_limit_spec(self, grid):
        spec = SdeSpec(drift=ZERO, diffusion=ONES, primary_driver=Brownian(),
                       t_end=0.1, dt=1e-2, n_paths=2000, seed=21)
        with pytest.raises(ValueError):
            weak_convergence_study([spec], bump(grid))
