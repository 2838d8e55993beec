import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; it is echoed now and again in the terminal summary."""

    def _emit(k: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} criterion {k}: {detail}"
        print(line)
        _LINES.append(line)
        return passed

    return _emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
