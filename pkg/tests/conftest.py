"""Collects acceptance outcomes so they can be printed as one line each."""

ACCEPTANCE_LINES: list[str] = []


def record(label: str, passed: bool | None, detail: str = "") -> bool | None:
    """``passed=None`` records a skipped criterion."""
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"{status}  {label}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
