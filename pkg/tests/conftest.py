"""Collects the acceptance verdicts and prints them after the run."""

ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
