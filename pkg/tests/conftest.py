"""Collects one verdict per acceptance criterion and prints them after the run."""

import pytest

_VERDICTS = {}
_DETAILS = {}


@pytest.fixture
def note(request):
    """Attach a short measurement to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        if marker is not None:
            _DETAILS.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        previous = _VERDICTS.get(n, True)
        _VERDICTS[n] = previous and not failed


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        verdict = "PASS" if _VERDICTS[n] else "FAIL"
        detail = "; ".join(_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n}: {verdict}" + (f"  ({detail})" if detail else ""))
