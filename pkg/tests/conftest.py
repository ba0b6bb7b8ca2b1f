import pytest
from hypothesis import settings

settings.register_profile("polystab", deadline=None, print_blob=True)
settings.load_profile("polystab")

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: acceptance(k, name, ok, detail)."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(k, name, ok, detail):
        line = f"ACCEPTANCE {k} {name}: {'PASS' if ok else 'FAIL'} {detail}"
        lines.append((k, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(line)
