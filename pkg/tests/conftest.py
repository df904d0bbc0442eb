"""Collects ``@pytest.mark.criterion`` outcomes into one summary line each."""

import pytest

_outcomes: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, title = mark.args
    entry = _outcomes.setdefault(number, {"title": title, "passed": True, "detail": []})
    entry["passed"] &= rep.passed
    entry["detail"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        e = _outcomes[number]
        status = "PASS" if e["passed"] else "FAIL"
        detail = "; ".join(dict.fromkeys(e["detail"]))
        terminalreporter.write_line(
            f"criterion {number:2d} {status}: {e['title']}" + (f" ({detail})" if detail else ""))
