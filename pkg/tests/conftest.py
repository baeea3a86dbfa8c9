"""Shared fixtures: tiny meshes and scenarios that assemble in well under a second."""
import numpy as np
import pytest

from rtrc.geometry import AbsorptionModel
from rtrc.mesh import SurfaceMesh, VolumeMesh, surface_from_volume
from rtrc.scenarios import box_with_hole_mesh


def grid_mesh(xs, ys, zs, region_of=None, hole=(None, None)) -> VolumeMesh:
    region_of = region_of or (lambda c: np.zeros(len(c), dtype=np.int64))
    return box_with_hole_mesh(np.asarray(xs, float), np.asarray(ys, float), np.asarray(zs, float), *hole, region_of)


def box_labels(lo, hi, tol=1e-9):
    """Label boundary triangles of an axis-aligned box: 0..5 for x-, x+, y-, y+, z-, z+ (6 otherwise)."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)

    def label(c, n):
        out = np.full(len(c), 6, dtype=np.int64)
        for ax in range(3):
            out[np.abs(c[:, ax] - lo[ax]) < tol] = 2 * ax
            out[np.abs(c[:, ax] - hi[ax]) < tol] = 2 * ax + 1
        return out

    return label


@pytest.fixture(scope="session")
def unit_cube():
    return grid_mesh([0, 1], [0, 1], [0, 1])


@pytest.fixture(scope="session")
def cube_scene():
    """4x4x4 unit cube with labelled faces and a uniform grey medium."""
    g = np.linspace(0, 1, 5)
    vol = grid_mesh(g, g, g)
    surf = surface_from_volume(vol, box_labels([0, 0, 0], [1, 1, 1]))
    return vol, surf, AbsorptionModel.grey({0: 0.5})


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


def closed_cube_surface() -> SurfaceMesh:
    vol = grid_mesh([0, 1], [0, 1], [0, 1])
    return surface_from_volume(vol, lambda c, n: np.zeros(len(c), dtype=np.int64))


# acceptance verdict lines, collected by tests/test_acceptance.py and repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
