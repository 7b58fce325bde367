import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """``record(number, passed, detail)`` prints and keeps one verdict line per criterion."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(number: int, passed: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(lines[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
