"""Collects acceptance-criterion verdicts and prints one line each at the end of the run."""

import pytest

_VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict():
    """``verdict(name, passed, detail)`` records a criterion line; the test should still assert."""
    def record(name: str, passed: bool, detail: str) -> bool:
        _VERDICTS.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
