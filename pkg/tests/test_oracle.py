import dataclasses

import numpy as np
import pytest

from nlhomog.errors import InputError, OracleMismatchError
from nlhomog.homogenization import cell_problems as hc
from nlhomog.homogenization import kernels as hk
from nlhomog.homogenization import oracle as ho
from nlhomog.homogenization import torus as ht


@pytest.fixture(scope="module")
def biased_dense(shifted_kernel, skewed_mu):
    return ho.dense_cell_solution(shifted_kernel, skewed_mu, 128)


class TestDenseCellSolution:
    def test_unit_coefficient(self, shifted_kernel, unit_mu):
        cell = hc.solve_cell(shifted_kernel, unit_mu, ht.TorusGrid(1, 128))
        dense = ho.dense_cell_solution(shifted_kernel, unit_mu, 128)
        report = ho.compare(cell, dense)
        assert max(report.discrepancies.values()) <= 1e-12
        assert dense.theta[0, 0] == pytest.approx(0.065, abs=1e-10)

    def test_biased_case_agrees(self, biased_cell, biased_dense):
        report = ho.compare(biased_cell, biased_dense)
        assert report.passed
        report.check()
        assert set(report.discrepancies) == set(ho.COMPARED_FIELDS)

    def test_dense_ground_state(self, biased_dense):
        assert biased_dense.v0.min() > 0.0
        assert biased_dense.v0.mean() == pytest.approx(1.0, abs=1e-14)
        np.testing.assert_allclose(biased_dense.a_matrix.T @ biased_dense.v0, 0.0, atol=1e-12)
        np.testing.assert_allclose(biased_dense.a_matrix.sum(axis=1), 0.0, atol=1e-14)

    def test_two_dimensional_rejected(self):
        kernel = hk.gaussian(0.2, dim=2)
        with pytest.raises(InputError):
            ho.dense_cell_solution(kernel, hk.constant_mu(1.0, dim=2), 16)

    def test_too_many_points_rejected(self, shifted_kernel, unit_mu):
        with pytest.raises(InputError):
            ho.dense_cell_solution(shifted_kernel, unit_mu, ho.MAX_ORACLE_POINTS + 1)


class TestMismatchDetection:
    def test_wrong_gauge_is_flagged(self, biased_cell, biased_dense, shifted_kernel, skewed_mu):
        grid = biased_cell.grid
        weighted = hc.weighted_operators(shifted_kernel, skewed_mu, grid)
        kappa1 = biased_cell.kappa1 + 1e-3
        theta, _ = hc.effective_matrix(kappa1, biased_cell.b, biased_cell.v0, weighted, grid)
        corrupted = dataclasses.replace(biased_cell, kappa1=kappa1, theta=theta)
        report = ho.compare(corrupted, biased_dense)
        assert report.discrepancies["theta"] <= ho.ORACLE_TOL
        assert report.discrepancies["kappa1"] == pytest.approx(1e-3, rel=1e-3)
        assert not report.passed
        with pytest.raises(OracleMismatchError) as info:
            report.check()
        assert info.value.field == "kappa1"
        assert info.value.exit_code == 4

    def test_first_failing_field_is_reported(self):
        report = ho.OracleReport({"v0": 0.0, "b": 1.0, "kappa1": 1.0, "theta": 0.0,
                                  "kappa2": 0.0}, tolerance=1e-8)
        with pytest.raises(OracleMismatchError) as info:
            report.check()
        assert info.value.field == "b"
