"""Collects ``acceptance``-marked outcomes and prints one verdict line per criterion."""

import pytest

_VERDICTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.failed:
        verdict = "FAIL"
        if not detail:
            detail = report.longrepr.reprcrash.message.splitlines()[0] if hasattr(report.longrepr, "reprcrash") else "error"
    elif report.skipped:
        verdict = "SKIP"
    else:
        verdict = "PASS"
    _VERDICTS[number] = (verdict, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        verdict, title, detail = _VERDICTS[number]
        line = f"criterion {number:2d} {verdict}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
