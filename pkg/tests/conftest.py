import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def record(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        _LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
