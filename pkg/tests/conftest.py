import pytest

# one status line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def record(number: int, passed: bool | None, detail: str):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record
