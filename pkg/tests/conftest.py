"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""

from __future__ import annotations

import pytest

_OUTCOMES: dict[int, list[bool]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(marker.args[0], []).append(report.passed)


@pytest.fixture
def verdict(request):
    """Attach a one-line measurement to the test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def note(text: str) -> None:
        _DETAILS.setdefault(marker.args[0], []).append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        status = "PASS" if all(_OUTCOMES[n]) else "FAIL"
        detail = "; ".join(_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}".rstrip())
