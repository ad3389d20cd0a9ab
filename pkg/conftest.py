"""Prints one PASS/FAIL line per acceptance criterion after the test run.

Tests tagged ``@pytest.mark.acceptance("<criterion>")`` feed the summary; a
criterion spanning several tests (e.g. parametrized trials) passes only if
every one of them does.
"""

import pytest

_ORDER: list[str] = []
_RESULTS: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if label not in _RESULTS:
        _ORDER.append(label)
        _RESULTS[label] = "PASS"
    if report.failed:
        _RESULTS[label] = "FAIL"
    elif report.skipped and _RESULTS[label] == "PASS":
        _RESULTS[label] = "SKIP"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for label in _ORDER:
        terminalreporter.write_line(f"[ACCEPTANCE] {_RESULTS[label]} - {label}")
