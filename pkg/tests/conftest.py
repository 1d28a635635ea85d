import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.engine import RearrangementMatrix
from core.marginals import discrete_uniform, discretize


@pytest.fixture
def nine_points():
    """Grid of the values 1..9."""
    return discretize(discrete_uniform(range(1, 10)), 9, "shifted")


@pytest.fixture
def comonotone_nines(nine_points):
    return RearrangementMatrix.from_grids([nine_points, nine_points])


@pytest.fixture
def single_thread(monkeypatch):
    monkeypatch.setenv("FRECHET_THREADS", "1")
