import pytest
import torch

torch.set_num_threads(1)

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def criterion():
    """Record a pass/fail line for a criterion and fail the test if it did not pass."""

    def record(number: int, name: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert passed, line

    return record
