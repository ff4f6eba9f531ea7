import re

import pytest

_results: dict[int, tuple[str, str]] = {}


@pytest.fixture
def note(record_property):
    """Attach a one-line detail to the acceptance summary."""

    def _note(text):
        record_property("detail", str(text))

    return _note


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.failed and not detail:
            detail = str(report.longrepr).strip().splitlines()[-1][:160]
        _results[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, detail = _results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {detail}".rstrip())
