import sys

import numpy as np
import pytest

from bsv.mesh import TriangleMesh, box, icosphere


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tetra():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    m = TriangleMesh(v, f)
    return m.oriented_outward()


@pytest.fixture
def cube():
    return box((1.0, 1.0, 1.0))


@pytest.fixture
def sphere2():
    return icosphere(2)


def random_closed_mesh(rng, subdivisions=1, noise=0.05):
    """Icosphere with jittered vertices: closed, small, irregular."""
    m = icosphere(subdivisions)
    return m.with_vertices(m.vertices + noise * rng.normal(size=m.vertices.shape))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda l: l.split()[1]):
        terminalreporter.write_line(line)
