import math

import numpy as np
import pytest

from nlhomog.errors import (InputError, SpecificationError, StepTooLargeError,
                            UnknownFamilyError)
from nlhomog.homogenization import kernels as hk


class TestEvalKernel:
    def test_gaussian_peak(self, even_kernel):
        peak = 1.0 / (0.2 * math.sqrt(2.0 * math.pi))
        assert float(hk.eval_kernel(even_kernel, 0.0)) == pytest.approx(peak, rel=1e-12)
        assert peak == pytest.approx(1.99471, abs=1e-5)

    def test_shifted_gaussian_peaks_at_shift(self, shifted_kernel, even_kernel):
        assert float(hk.eval_kernel(shifted_kernel, 0.3)) == pytest.approx(
            float(hk.eval_kernel(even_kernel, 0.0)), rel=1e-12)

    def test_bump_vanishes_outside_support(self):
        bump = hk.compact_bump(0.5)
        assert float(hk.eval_kernel(bump, 0.6)) == 0.0
        assert float(hk.eval_kernel(bump, 0.0)) > 0.0

    def test_evaluates_arrays_of_points(self, even_kernel):
        z = np.linspace(-1.0, 1.0, 11)
        assert hk.eval_kernel(even_kernel, z).shape == (11,)

    def test_two_dimensional_points(self):
        spec = hk.anisotropic_gaussian([[0.04, 0.01], [0.01, 0.02]], shift=(0.2, -0.1))
        values = hk.eval_kernel(spec, np.zeros((3, 4, 2)))
        assert values.shape == (3, 4)

    def test_unknown_family(self):
        with pytest.raises(UnknownFamilyError):
            hk.eval_kernel(hk.KernelSpec("levy_flight"), 0.0)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(InputError):
            hk.gaussian(0.0)


class TestMoments:
    def test_gaussian(self, even_kernel):
        moments = hk.kernel_moments(even_kernel)
        assert moments.mass == 1.0
        np.testing.assert_allclose(moments.first, [0.0])
        np.testing.assert_allclose(moments.second, [[0.04]], rtol=1e-14)

    def test_shifted_gaussian(self, shifted_kernel):
        moments = hk.kernel_moments(shifted_kernel)
        np.testing.assert_allclose(moments.first, [0.3], rtol=1e-14)
        np.testing.assert_allclose(moments.second, [[0.13]], rtol=1e-14)

    def test_bump_against_rectangle_rule(self, bump_kernel):
        moments = hk.kernel_moments(bump_kernel)
        for h in (0.35 / 2000, 0.35 / 4000):
            z = np.arange(-0.4, 0.4, h)
            values = hk.eval_kernel(bump_kernel, z)
            assert h * values.sum() == pytest.approx(1.0, abs=1e-9)
            assert h * (z * values).sum() == pytest.approx(moments.first[0], abs=1e-9)
            assert h * (z * z * values).sum() == pytest.approx(moments.second[0, 0], abs=1e-9)

    def test_composite_carries_symmetric_mass(self, even_kernel):
        pert = hk.make_cutoff_perturbation(even_kernel, 0.01)
        moments = hk.kernel_moments(hk.composite_biased(pert))
        assert moments.mass == pytest.approx(1.0, abs=1e-10)
        # l c contributes l * int z^2 a_sym = 0.01 * 0.04 to the drift.
        assert moments.first[0] == pytest.approx(4e-4, abs=1e-10)


class TestPerturbations:
    def test_cutoff_profile(self):
        np.testing.assert_array_equal(hk.cutoff_profile([0.0, 0.1, 0.25]), [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(hk.cutoff_profile([0.5, 0.6, 3.0]), [0.0, 0.0, 0.0])
        inner = hk.cutoff_profile(np.linspace(0.25, 0.5, 101))
        assert np.all(np.diff(inner) <= 0.0)

    def test_cutoff_at_zero_ell_is_first_moment_density(self, even_kernel):
        pert = hk.make_cutoff_perturbation(even_kernel, 0.0)
        z = np.linspace(-1.0, 1.0, 41)
        np.testing.assert_array_equal(hk.eval_perturbation(pert, z)[:, 0],
                                      z * hk.eval_kernel(even_kernel, z))

    def test_cutoff_switches_off_far_out(self, even_kernel):
        pert = hk.make_cutoff_perturbation(even_kernel, 1.0)
        c = hk.eval_perturbation(pert, np.array([0.2, 0.6]))[:, 0]
        assert c[0] == pytest.approx(0.2 * float(hk.eval_kernel(even_kernel, 0.2)), rel=1e-14)
        assert c[1] == 0.0

    @pytest.mark.parametrize("kind", ["cutoff", "dipole"])
    def test_antisymmetric(self, even_kernel, kind):
        pert = hk.make_cutoff_perturbation(even_kernel, 0.5)
        if kind == "dipole":
            pert = hk.make_dipole_perturbation(even_kernel, 0.5, width=0.15)
        z = np.random.default_rng(3).uniform(-2.0, 2.0, 500)
        np.testing.assert_array_equal(hk.eval_perturbation(pert, z),
                                      -hk.eval_perturbation(pert, -z))

    def test_cutoff_needs_even_kernel(self, shifted_kernel):
        with pytest.raises(InputError):
            hk.make_cutoff_perturbation(shifted_kernel, 0.01)

    def test_ell_dimension_checked(self, even_kernel):
        with pytest.raises(InputError):
            hk.make_cutoff_perturbation(even_kernel, (0.01, 0.0))

    def test_cutoff_family_stays_nonnegative(self, even_kernel):
        pert = hk.make_cutoff_perturbation(even_kernel, 10.0)
        assert hk.check_nonnegative(hk.composite_biased(pert)) >= 0.0

    def test_large_dipole_step_detected(self, even_kernel):
        pert = hk.make_dipole_perturbation(even_kernel, 10.0, width=0.2)
        with pytest.raises(StepTooLargeError):
            hk.check_nonnegative(hk.composite_biased(pert))


class TestCoefficients:
    def test_values(self, unit_mu, trig_mu):
        assert float(hk.eval_mu(unit_mu, 0.3, 0.7)) == 1.0
        assert float(hk.eval_mu(trig_mu, 0.0, 0.0)) == pytest.approx(1.5)
        y = np.linspace(0.0, 1.0, 17)
        np.testing.assert_allclose(hk.eval_mu(trig_mu, 0.25, y), 1.0, atol=1e-15)

    def test_periodic(self, skewed_mu):
        x, y = np.array([0.13, 0.71]), np.array([0.42, 0.05])
        np.testing.assert_allclose(hk.eval_mu(skewed_mu, x + 3.0, y - 2.0),
                                   hk.eval_mu(skewed_mu, x, y), rtol=1e-13)

    def test_bounds_hold_on_dense_sample(self):
        mu = hk.trig_product_mu(0.9, dim=2, phase_x=0.2)
        rng = np.random.default_rng(0)
        values = hk.eval_mu(mu, rng.random((200_000, 2)), rng.random((200_000, 2)))
        assert mu.alpha1 <= values.min() and values.max() <= mu.alpha2

    def test_declared_bounds_enforced(self):
        mu = hk.trig_product_mu(0.5, alpha1=0.8)
        with pytest.raises(SpecificationError):
            hk.eval_mu(mu, np.linspace(0.0, 1.0, 9), 0.5)

    @pytest.mark.parametrize("alpha1, alpha2", [(0.0, 1.0), (2.0, 1.0), (-1.0, 1.0)])
    def test_invalid_bounds(self, alpha1, alpha2):
        with pytest.raises(SpecificationError):
            hk.constant_mu(1.0, alpha1=alpha1, alpha2=alpha2)

    def test_amplitude_must_keep_mu_positive(self):
        with pytest.raises(SpecificationError):
            hk.trig_product_mu(1.0)

    def test_scaled(self, skewed_mu):
        doubled = skewed_mu.scaled(2.0)
        assert (doubled.alpha1, doubled.alpha2) == (2 * skewed_mu.alpha1, 2 * skewed_mu.alpha2)
        x, y = np.random.default_rng(1).random((2, 50))
        np.testing.assert_allclose(hk.eval_mu(doubled, x, y), 2 * hk.eval_mu(skewed_mu, x, y))

    @pytest.mark.parametrize("mu", [hk.constant_mu(2.0), hk.separable_mu(0.3, -0.4, phase_x=0.1),
                                    hk.trig_product_mu(0.5, dim=2, phase_y=0.3)])
    def test_separable_terms_reproduce_mu(self, mu):
        rng = np.random.default_rng(2)
        x, y = rng.random((100, mu.dim)), rng.random((100, mu.dim))
        total = sum(lam(x) * nu(y) for lam, nu in hk.separable_terms(mu))
        np.testing.assert_allclose(total, hk.eval_mu(mu, x, y), rtol=1e-14)

    def test_tabulated(self):
        mu = hk.tabulated_mu([[1.0, 2.0], [3.0, 4.0]])
        assert (mu.alpha1, mu.alpha2) == (1.0, 4.0)
        np.testing.assert_array_equal(hk.eval_mu(mu, [0.1, 0.6, 1.6], [0.7, 0.2, 0.9]),
                                      [2.0, 3.0, 4.0])
        assert hk.separable_terms(mu) is None

    def test_symmetry_check(self, trig_mu, skewed_mu):
        assert hk.is_symmetric_mu(trig_mu)
        assert not hk.is_symmetric_mu(skewed_mu)


class TestCheckBounds:
    def test_consistent_bounds_pass(self, skewed_mu):
        hk.check_bounds(skewed_mu)

    def test_inconsistent_bounds_fail(self):
        with pytest.raises(SpecificationError):
            hk.check_bounds(hk.trig_product_mu(0.5, alpha2=1.2))
