"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

from collections import defaultdict

import pytest

_results = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        _titles[number] = title
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        case = item.callspec.id if hasattr(item, "callspec") else ""
        _results[number].append((report.passed, case, detail))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        runs = _results[number]
        ok = all(passed for passed, _, _ in runs)
        tr.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {_titles[number]}")
        for passed, case, detail in runs:
            if case or detail:
                tr.write_line(f"    [{'ok' if passed else 'failed'}] {case} {detail}".rstrip())
