import numpy as np
import pytest

from coordfit.grid import Grid


def rotation_z(deg):
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def central_box(grid, fraction=0.8):
    """Boolean array selecting the central ``fraction`` of each axis."""
    sel = []
    for n in grid.dims:
        lo = int(np.floor(n * (1 - fraction) / 2))
        hi = int(np.ceil(n - n * (1 - fraction) / 2))
        idx = np.zeros(n, dtype=bool)
        idx[lo:hi] = True
        sel.append(idx)
    return sel[0][:, None, None] & sel[1][None, :, None] & sel[2][None, None, :]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid.regular((12, 10, 8), (2.0, 2.0, 2.0))
