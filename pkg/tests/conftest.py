import pytest

_RESULTS = {}


@pytest.fixture(scope="session")
def acceptance():
    """Recorder ``acceptance(n, title, ok, detail)`` for the acceptance summary."""

    def record(n, title, ok, detail=""):
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _RESULTS[(n, title)] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[key])
