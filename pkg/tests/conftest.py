import numpy as np
import pytest

from kneecart.volume import BinaryMask, Geometry


def iso_geometry(dims, spacing=1.0, origin=(0.0, 0.0, 0.0)):
    return Geometry(tuple(dims), (spacing,) * 3, tuple(origin), np.eye(3))


@pytest.fixture
def unit_geometry():
    return iso_geometry((8, 8, 8))


def box_mask(dims, lo, hi, spacing=1.0):
    """Solid axis-aligned box [lo, hi) on an isotropic grid."""
    bits = np.zeros(dims, dtype=bool)
    bits[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return BinaryMask(bits, iso_geometry(dims, spacing))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import acceptance_log

    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.LINES:
        terminalreporter.write_line(line)
