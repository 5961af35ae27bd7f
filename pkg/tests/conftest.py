import pytest

from acceptance_report import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])


@pytest.fixture
def criterion(request):
    """Record PASS/FAIL for an acceptance criterion, plus a short measured detail."""
    def record(number: int, title: str):
        return _Recorder(number, title)
    return record


class _Recorder:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        RESULTS[self.number] = line
        print(line)
        return False
