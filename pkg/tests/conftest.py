import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the pass flag for ``assert``."""

    def record(tag, ok, detail):
        line = f"{tag:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
