"""Collects one status line per acceptance criterion and prints them at the end of the run."""

import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def record():
    def _record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} | {detail}"
        print(_CRITERIA[number])

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
