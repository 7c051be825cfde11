import numpy as np
import pytest

from leapsbounds.core import RuntimeTable
from leapsbounds.oracle import TableBackend


def make_table(rows, cap=1e6, kappa0=0.5):
    return RuntimeTable(np.asarray(rows, dtype=float), cap=cap, kappa0=kappa0)


def make_backend(rows, cap=1e6, kappa0=0.5, censoring="strict"):
    return TableBackend(make_table(rows, cap, kappa0), censoring)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
