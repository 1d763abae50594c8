import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Callable ``report(number, name, passed, detail)`` that records a criterion outcome."""
    lines = request.config.stash.setdefault(_LINES, [])

    def report(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2} {name}: {detail}"
        lines.append((number, line))
        print("\n" + line, flush=True)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
