import numpy as np
import pytest

from contourpose.geometry import CameraIntrinsics, Pose, quat_from_axis_angle

# acceptance criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def front_pose(z=0.5, axis=(1.0, 1.0, 0.3), angle=0.6, xy=(0.0, 0.0)):
    """A generic view of an object centred in front of the camera."""
    return Pose(quat_from_axis_angle(axis, angle), np.array([xy[0], xy[1], z]))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
