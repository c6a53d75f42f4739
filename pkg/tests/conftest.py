import pytest

ACCEPTANCE_FILE = "test_acceptance.py"
_results: dict[str, tuple[str, str]] = {}
_notes: list[str] = []


@pytest.fixture
def note():
    """Append a line to the acceptance summary printed at the end of the run."""
    return _notes.append


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.outcome != "passed":
        if name not in _results or _results[name][0] == "PASS":
            _results[name] = ("PASS" if report.passed else "FAIL", report.when)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance summary")
    for name in sorted(_results):
        status, _ = _results[name]
        tr.write_line(f"{status}  {name.removeprefix('test_')}")
    for line in _notes:
        tr.write_line(line)
