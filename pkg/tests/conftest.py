"""Shared pytest hooks: the acceptance suite's pass/fail lines go into the terminal summary."""

ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> bool:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}"
    if detail:
        line += f": {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
