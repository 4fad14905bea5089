import pytest

_VERDICTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS_KEY] = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line per acceptance criterion, then assert."""
    lines = request.config.stash[_VERDICTS_KEY]

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
