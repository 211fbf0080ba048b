import numpy as np
import pytest

from nlhomog.errors import CapabilityError, InputError, TruncationError
from nlhomog.homogenization import kernels as hk
from nlhomog.homogenization import torus as ht


class TestTorusGrid:
    def test_nodes(self):
        grid = ht.TorusGrid(2, 4)
        assert grid.nodes.shape == (16, 2)
        np.testing.assert_array_equal(grid.nodes[5], [0.25, 0.25])
        assert grid.weight == 1.0 / 16

    @pytest.mark.parametrize("dim, n", [(3, 8), (1, 3)])
    def test_invalid(self, dim, n):
        with pytest.raises(InputError):
            ht.TorusGrid(dim, n)

    def test_quadrature_of_constants_is_exact(self):
        for n in (16, 64, 128):
            assert ht.quadrature(ht.TorusGrid(1, n).ones(), ht.TorusGrid(1, n)) == 1.0

    def test_quadrature_of_cosine(self):
        grid = ht.TorusGrid(1, 64)
        field = grid.sample(lambda x: np.cos(2.0 * np.pi * x[:, 0]))
        assert abs(ht.quadrature(field, grid)) < 1e-15


class TestPeriodization:
    @pytest.mark.parametrize("alpha, expected", [(0, 1.0), (1, 0.3), (2, 0.13)])
    def test_moments_of_shifted_gaussian(self, shifted_kernel, alpha, expected):
        grid = ht.TorusGrid(1, 64)
        periodized = ht.periodize_weighted(shifted_kernel, alpha, grid)
        assert ht.quadrature(periodized.values, grid) == pytest.approx(expected, abs=1e-10)
        assert periodized.tail_bound < 1e-14
        assert periodized.shells_used >= 3

    @pytest.mark.parametrize("kernel", [
        hk.gaussian(0.2),
        hk.compact_bump(0.25, shift=0.1),
        hk.composite_biased(hk.make_cutoff_perturbation(hk.gaussian(0.2), 0.01)),
    ], ids=["gaussian", "bump", "composite"])
    def test_unweighted_periodization_is_nonnegative(self, kernel):
        periodized = ht.periodize_weighted(kernel, 0, ht.TorusGrid(1, 64))
        assert periodized.values.min() >= 0.0

    def test_odd_weight_of_even_kernel_integrates_to_zero(self, even_kernel):
        grid = ht.TorusGrid(1, 64)
        periodized = ht.periodize_weighted(even_kernel, 1, grid)
        assert abs(ht.quadrature(periodized.values, grid)) < 1e-10

    def test_two_dimensional_weights(self):
        spec = hk.anisotropic_gaussian([[0.04, 0.01], [0.01, 0.02]], shift=(0.2, -0.1))
        grid = ht.TorusGrid(2, 32)
        cross = ht.periodize_weighted(spec, ht.weight_exponents(2, 0, 1), grid)
        # M_2 = covariance + m m^T
        assert ht.quadrature(cross.values, grid) == pytest.approx(0.01 - 0.02, abs=1e-10)

    def test_truncation_error_when_tail_never_decays(self):
        grid = ht.TorusGrid(1, 8)
        with pytest.raises(TruncationError):
            ht.periodize_function(lambda z: np.ones(z.shape[:-1]), 0, grid, radius=1.0,
                                  max_shells=5)

    def test_weight_exponents(self):
        assert ht.weight_exponents(2) == (0, 0)
        assert ht.weight_exponents(2, 1, 1) == (0, 2)
        assert ht.weight_exponents(1, 0) == (1,)

    def test_invalid_weight(self, even_kernel):
        with pytest.raises(InputError):
            ht.periodize_weighted(even_kernel, 3, ht.TorusGrid(1, 16))


def _operators(kernel, mu, n, storage="auto"):
    grid = ht.TorusGrid(kernel.dim, n)
    return ht.assemble_operators(ht.periodize_weighted(kernel, 0, grid), mu, grid, storage)


class TestOperators:
    def test_unit_coefficient_preserves_mass(self, shifted_kernel, unit_mu):
        ops = _operators(shifted_kernel, unit_mu, 64)
        np.testing.assert_allclose(ops.g_diag, 1.0, atol=1e-12)

    def test_row_sums_match_apply_to_ones(self, shifted_kernel, skewed_mu):
        ops = _operators(shifted_kernel, skewed_mu, 64)
        np.testing.assert_array_equal(ops.g_diag, ops.k_apply(ops.grid.ones()))
        np.testing.assert_array_equal(ops.a_apply(ops.grid.ones()), np.zeros(64))

    @pytest.mark.parametrize("storage", ["dense", "matrix_free"])
    def test_adjoint_consistency(self, shifted_kernel, skewed_mu, storage):
        ops = _operators(shifted_kernel, skewed_mu, 64, storage)
        rng = np.random.default_rng(0)
        phi, psi = rng.standard_normal((2, 64))
        assert ops.k_apply(phi) @ psi == pytest.approx(phi @ ops.adjoint_apply(psi), rel=1e-12)
        assert ops.a_apply(phi) @ psi == pytest.approx(phi @ ops.a_adjoint(psi), rel=1e-12)

    def test_matrix_free_matches_dense(self, shifted_kernel, skewed_mu):
        dense = _operators(shifted_kernel, skewed_mu, 64, "dense")
        free = _operators(shifted_kernel, skewed_mu, 64, "matrix_free")
        assert dense.kernel_op.mode == "dense" and free.kernel_op.mode == "matrix_free"
        phi = np.random.default_rng(1).standard_normal(64)
        np.testing.assert_allclose(free.k_apply(phi), dense.k_apply(phi), atol=1e-12)
        np.testing.assert_allclose(free.adjoint_apply(phi), dense.adjoint_apply(phi), atol=1e-12)
        np.testing.assert_allclose(free.g_diag, dense.g_diag, atol=1e-12)

    def test_matrix_free_matches_dense_in_two_dimensions(self):
        kernel = hk.anisotropic_gaussian([[0.04, 0.01], [0.01, 0.02]], shift=(0.2, -0.1))
        mu = hk.trig_product_mu(0.4, dim=2, phase_x=0.2)
        dense = _operators(kernel, mu, 16, "dense")
        free = _operators(kernel, mu, 16, "matrix_free")
        phi = np.random.default_rng(2).standard_normal(256)
        np.testing.assert_allclose(free.k_apply(phi), dense.k_apply(phi), atol=1e-12)

    def test_tabulated_coefficient_needs_dense_storage(self, shifted_kernel):
        mu = hk.tabulated_mu(np.full((4, 4), 1.0))
        with pytest.raises(CapabilityError):
            _operators(shifted_kernel, mu, 16, "matrix_free")

    def test_storage_mode(self, trig_mu):
        tabulated = hk.tabulated_mu(np.full((4, 4), 1.0))
        assert ht.storage_mode(ht.TorusGrid(1, 16), tabulated) == "dense"
        assert ht.storage_mode(ht.TorusGrid(1, 16), trig_mu, "matrix_free") == "matrix_free"
        assert ht.storage_mode(ht.TorusGrid(1, 8192), trig_mu) == "matrix_free"
        with pytest.raises(CapabilityError):
            ht.storage_mode(ht.TorusGrid(1, 8192), tabulated)

    def test_row_sums_converge_under_refinement(self, bump_kernel, trig_mu):
        g = {n: _operators(bump_kernel, trig_mu, n).g_diag for n in (32, 64, 128)}
        coarse_gap = np.abs(g[32] - g[64][::2]).max()
        fine_gap = np.abs(g[64] - g[128][::2]).max()
        assert fine_gap < coarse_gap

    def test_weighted_kernel_rejected(self, even_kernel, unit_mu):
        grid = ht.TorusGrid(1, 16)
        with pytest.raises(InputError):
            ht.assemble_operators(ht.periodize_weighted(even_kernel, 1, grid), unit_mu, grid)
