import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion_line(request):
    """Call with (number, ok, detail); writes one PASS/FAIL line straight to the terminal."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
