"""Acceptance reporting: one PASS/FAIL line per criterion in the terminal summary."""
import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "ran": False, "details": []})
    if report.when == "call" or report.failed:
        entry["ran"] = entry["ran"] or report.when == "call"
        entry["ok"] = entry["ok"] and report.passed
    if report.when == "call":
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["ok"] and r["ran"] else "FAIL"
        line = f"criterion {number} {status}: {r['title']}"
        if r["details"]:
            line += " (" + "; ".join(r["details"]) + ")"
        terminalreporter.write_line(line)
