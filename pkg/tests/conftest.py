"""Shared pytest wiring: the acceptance summary table."""

_acceptance_results: list[tuple[str, str, str]] = []


def record_acceptance(criterion: str, passed: bool, detail: str = "") -> None:
    _acceptance_results.append((criterion, "PASS" if passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _acceptance_results:
        line = f"[{status}] {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
