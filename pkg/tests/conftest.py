import pytest

_LINES: list[tuple[int, str]] = []


@pytest.fixture(scope="session")
def report():
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append((n, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
