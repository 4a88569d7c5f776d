"""Collects one pass/fail line per acceptance criterion and prints them at the end."""

CRITERIA_LINES: dict[int, str] = {}


def record(criterion) -> None:
    CRITERIA_LINES[criterion.number] = criterion.line()


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[n])
