"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_TITLES = {}
_OUTCOMES = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _TITLES[number] = title
            _OUTCOMES.setdefault(number, [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES[mark.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        results = _OUTCOMES[number]
        status = "PASS" if results and all(results) else ("NOT RUN" if not results else "FAIL")
        terminalreporter.write_line(f"criterion {number}: {status}  {_TITLES[number]}")
