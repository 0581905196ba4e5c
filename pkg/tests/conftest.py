"""Shared test plumbing: the acceptance-criterion line recorder."""

import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion and return the verdict."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'} - {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
