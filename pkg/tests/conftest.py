import numpy as np
import pytest

from momentumct.geometry import FanBeamGeometry

ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_geom():
    return FanBeamGeometry.covering(8, 4.0, 16, 13, source_to_iso=60.0, source_to_detector=110.0)


@pytest.fixture(scope="session")
def small_geom():
    return FanBeamGeometry.covering(16, 2.0, 24, 25, source_to_iso=80.0, source_to_detector=150.0)


@pytest.fixture(scope="session")
def unit_geom():
    # one pixel of pitch 1 seen by one central ray: A = [1]
    return FanBeamGeometry(1, 1.0, 1, 1, 4.0, 2.0, 4.0)


def dense_system(geom):
    """Densify A by forward projecting every unit basis image."""
    from momentumct.projector import forward_project

    cols = []
    for k in range(geom.n_pixels):
        e = np.zeros(geom.n_pixels)
        e[k] = 1.0
        cols.append(forward_project(geom, e.reshape(geom.shape)).ravel())
    return np.stack(cols, axis=1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
