"""Shared test plumbing: collects acceptance-criterion verdict lines so the
final pytest output ends with one PASS/FAIL line per pinned criterion."""

CRITERION_LINES: list[str] = []


def criterion_line(line: str) -> None:
    CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
