import numpy as np
import pytest

from metaopt.tasks import toy_task


@pytest.fixture(scope="session")
def toy():
    return toy_task()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion
_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            status = "FAIL (expected; see reason)" if report.skipped else "PASS (unexpected)"
        elif report.skipped:
            status = "SKIP"
        else:
            status = "PASS" if report.passed else "FAIL"
        _CRITERIA[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        terminalreporter.write_line(f"{name}: {_CRITERIA[name]}")
