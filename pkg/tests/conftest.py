from __future__ import annotations

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERION_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
        terminalreporter.write_line(line)
