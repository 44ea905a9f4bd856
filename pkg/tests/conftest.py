import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion(request):
    """Call with the outcome of one acceptance criterion; prints and records its PASS/FAIL line."""
    lines = request.config.stash[_LINES_KEY]

    def report(number: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
        ok = bool(ok) and elapsed < budget
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {title}: {detail} [{elapsed:.1f}s of {budget:g}s]"
        print(line)
        lines.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
