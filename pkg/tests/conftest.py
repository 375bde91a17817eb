from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from liri.base import Passage, Query  # noqa: E402
from liri.data import Dataset, SynthConfig, generate_synthetic  # noqa: E402

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n} {status}: {title}" + (f" [{detail}]" if detail else ""))


@pytest.fixture(scope="session")
def synth() -> Dataset:
    """The default synthetic corpus: 50 passages, 3 train and 3 test queries each, noise 0.2."""
    return generate_synthetic(SynthConfig())


@pytest.fixture
def toy() -> Dataset:
    passages = [
        Passage("d1", "the cat sat on the mat"),
        Passage("d2", "a dog sat by the door"),
        Passage("d3", "birds sing in the morning"),
    ]
    train = [
        Query("q1", "where did the cat sit", "d1"),
        Query("q2", "dog at the door", "d2"),
        Query("q3", "morning birds", "d3"),
    ]
    test = [Query("t1", "cat mat", "d1"), Query("t2", "singing birds", "d3")]
    return Dataset(passages, train, test, name="toy")
