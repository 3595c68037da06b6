import numpy as np
import pytest

from freescan.simulator import ProceduralVolume, TrajectorySpec, default_calibration, simulate_scan


@pytest.fixture(scope="session")
def small_scan():
    spec = TrajectorySpec("c_shape", "perpendicular", length_mm=40.0, n_frames=30)
    return simulate_scan(spec, ProceduralVolume(seed=3), default_calibration(0), rng_seed=1, width=20, height=16,
                         subject_id="s1", scan_label="c")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion(pytestconfig):
    """``report_criterion(n, passed, detail)`` prints and records one pass/fail line."""

    def record(number: int, passed: bool, detail: str):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(line)
        pytestconfig.acceptance_lines.append(line)
        return passed

    return record
