"""Shared test plumbing: the acceptance verdict registry.

Acceptance tests report one PASS/FAIL line per criterion; the lines are
echoed in a terminal section after the run so they are visible even when
pytest captures per-test output.
"""

VERDICTS = []


def record_verdict(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS.append((criterion, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
