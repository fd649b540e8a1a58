import pytest

CRITERIA = {}


@pytest.fixture
def record():
    """Store the one-line verdict of an acceptance criterion for the terminal summary."""
    def _record(n, ok, detail):
        CRITERIA[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(CRITERIA[n])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
