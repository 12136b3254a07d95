import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def small_cfg(tmp_path):
    from fedmesh.config import build_config

    def make(**overrides):
        values = dict(clients=3, rounds=2, epochs=2, lr=1e-3, n_samples=240,
                      clock="virtual", out=str(tmp_path / "run"))
        values.update(overrides)
        return build_config(overrides=values)

    return make


# one PASS/FAIL line per acceptance criterion at the end of the run
_criteria = {}


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords or report.when not in ("setup", "call"):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" or report.outcome != "passed":
        _criteria[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        terminalreporter.write_line(f"{_criteria[name]}  {name}")
