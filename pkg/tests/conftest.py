import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; ``check`` decides PASS/FAIL and the assertion follows."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
