from __future__ import annotations

import numpy as np
import pytest

from disagg.geoio import CovariateStack, Grid, Polygon, PolygonSet
from disagg.prepare import prepared_from_arrays


def square(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]], dtype=float)


def small_prep(seed=0, n_polygons=3, pixels_per_polygon=4, n_cov=1, lattice_n=3, responses=None,
               sample_sizes=None, spacing=None):
    """Random pixel arrays inside a [0, 2] x [0, 2] box with a lattice_n x lattice_n lattice."""
    rng = np.random.default_rng(seed)
    n = n_polygons * pixels_per_polygon
    pidx = np.repeat(np.arange(n_polygons), pixels_per_polygon)
    x = rng.uniform(0.0, 2.0, n)
    y = rng.uniform(0.0, 2.0, n)
    x[0], y[0], x[-1], y[-1] = 0.0, 0.0, 2.0, 2.0
    X = rng.normal(size=(n, n_cov))
    a = rng.uniform(0.5, 2.0, n)
    if responses is None:
        responses = rng.poisson(5.0, n_polygons).astype(float)
    h = spacing if spacing is not None else 2.0 / (lattice_n - 1)
    return prepared_from_arrays(pidx, x, y, X, a, responses, sample_sizes=sample_sizes, spacing=h, pad_nodes=0)


def grid_stack(ncols=4, nrows=4, n_cov=2, seed=0, cellsize=1.0):
    rng = np.random.default_rng(seed)
    grids = [Grid(ncols, nrows, 0.0, 0.0, cellsize, rng.normal(size=(nrows, ncols))) for _ in range(n_cov)]
    return CovariateStack([f"c{k}" for k in range(n_cov)], grids)


def two_halves(ncols=4, nrows=4, responses=(3.0, 7.0)):
    """Two polygons splitting a grid into left and right halves."""
    half = ncols / 2
    return PolygonSet([
        Polygon("L", responses[0], [square(0, 0, half, nrows)]),
        Polygon("R", responses[1], [square(half, 0, ncols, nrows)]),
    ])


@pytest.fixture
def prep_small():
    return small_prep()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
