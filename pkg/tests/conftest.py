import numpy as np
import pytest

from gdsm.phantom import PhantomParams, generate_subject

_acceptance: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion reported in the summary")


def pytest_runtest_logreport(report):
    label = getattr(report, "acceptance_label", None)
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid] = (label, report.outcome.upper())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance_label = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in sorted(_acceptance.values()):
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {label}")


@pytest.fixture(scope="session")
def phantom_pair():
    """A noisy 40-year-old male phantom at both resolutions."""
    return generate_subject(PhantomParams(age=40.0, gender=1, noise_sigma=0.02, seed=11), "sub-x")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
