"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from crossdiff.entropy import SktCoefficients, make_skt_structure, skt_rates
from crossdiff.grids import Field, TorusGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def balanced_coefficients(d=(0.1, 0.1), cross=((0.0, 1.0), (1.0, 0.0)),
                          pi=(1.0, 1.0)) -> SktCoefficients:
    return SktCoefficients(d=d, d_cross=np.array(cross, dtype=np.float64), pi=pi)


def build_system(d=(0.1, 0.1), cross=((0.0, 1.0), (1.0, 0.0)), pi=(1.0, 1.0)):
    c = balanced_coefficients(d, cross, pi)
    return c, make_skt_structure(c), skt_rates(c)


def cosine_pair(grid: TorusGrid, base=1.0, amplitude=0.3):
    x = grid.coords()[0]
    freq = 2.0 * np.pi / grid.length
    u1 = Field(grid, base + amplitude * np.cos(freq * x))
    u2 = Field(grid, base - amplitude * np.cos(freq * x))
    return u1, u2
