"""Collects acceptance verdicts and prints them after the test run."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Call ``verdict(label, ok, detail)`` once per acceptance criterion."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
