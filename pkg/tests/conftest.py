import pytest

_LINES = []


@pytest.fixture
def criterion():
    """record(n, ok, detail): log a PASS/FAIL line for criterion n, then assert it."""

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _LINES.append((n, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
