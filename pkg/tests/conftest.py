"""Shared pytest plumbing: collects acceptance pass/fail lines and prints
them in the terminal summary."""

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}: {text}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
