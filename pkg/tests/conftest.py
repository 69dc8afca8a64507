import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_record(request):
    """Store one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(criterion: str, passed: bool, detail: str) -> None:
        lines[criterion] = f"{criterion:<4} {'PASS' if passed else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda c: int(c[1:])):
        terminalreporter.write_line(lines[key])
