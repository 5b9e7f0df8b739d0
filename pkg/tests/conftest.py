import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record the PASS/FAIL line of one acceptance criterion."""

    def record(number: int, passed: bool, title: str, detail: str, seconds: float) -> None:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"{status} [{number:2d}] {title}: {detail} ({seconds:.2f} s)"
        print(ACCEPTANCE_LINES[number])

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
