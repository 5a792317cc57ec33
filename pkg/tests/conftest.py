import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line, printed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(n, ok: bool, detail: str) -> bool:
        label = f"criterion {n:>2}" if isinstance(n, int) else f"derived {n}"
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
