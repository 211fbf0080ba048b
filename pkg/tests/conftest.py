"""Shared fixtures; puts src/ on the path like docs/conf.py does."""

import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))

import pytest  # noqa: E402

from nlhomog.homogenization import cell_problems as hc  # noqa: E402
from nlhomog.homogenization import kernels as hk  # noqa: E402
from nlhomog.homogenization import torus as ht  # noqa: E402


@pytest.fixture(scope="session")
def even_kernel():
    return hk.gaussian(0.2)


@pytest.fixture(scope="session")
def shifted_kernel():
    return hk.shifted_gaussian(0.2, 0.3)


@pytest.fixture(scope="session")
def bump_kernel():
    return hk.compact_bump(0.25, shift=0.1)


@pytest.fixture(scope="session")
def unit_mu():
    return hk.constant_mu(1.0)


@pytest.fixture(scope="session")
def trig_mu():
    return hk.trig_product_mu(0.5)


@pytest.fixture(scope="session")
def skewed_mu():
    """Non-symmetric trig_product coefficient."""
    return hk.trig_product_mu(0.5, phase_x=0.1, phase_y=0.35)


@pytest.fixture(scope="session")
def biased_cell(shifted_kernel, skewed_mu):
    return hc.solve_cell(shifted_kernel, skewed_mu, ht.TorusGrid(1, 128))
