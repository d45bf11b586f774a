import pytest

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """``report(number, name, passed, detail)``: log one acceptance line, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append((number, line))
        print(line)
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
