"""Shared fixtures and the acceptance summary printed after every run."""

from __future__ import annotations

import numpy as np
import pytest

from theftgate.frame import FeatureFrame

_CRITERIA: dict[int, tuple[str, str]] = {}  # number -> (text, outcome)
_MARKS: dict[str, tuple[int, str]] = {}  # node id -> (number, text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion check")


def pytest_runtest_logreport(report):
    number, text = _MARKS.get(report.nodeid, (None, None))
    if number is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[number] = (text, report.outcome)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _MARKS[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _MARKS:
        return
    terminalreporter.section("acceptance criteria")
    for number, text in sorted({v for v in _MARKS.values()}):
        outcome = _CRITERIA.get(number, (text, "not run"))[1]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"[{status}] criterion {number}: {text}")


def make_frame(values, labels=None, targets=None, columns=None, users=None) -> FeatureFrame:
    X = np.asarray(values, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    return FeatureFrame(
        columns or [f"f{j}" for j in range(p)],
        X,
        np.asarray(users if users is not None else ["u01"] * n, dtype=object),
        np.arange(n, dtype=np.int64) * 5000,
        labels,
        targets,
    )


@pytest.fixture
def frame_factory():
    return make_frame
