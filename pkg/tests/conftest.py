import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": [], "skipped": False})
    entry["ok"] &= rep.passed
    entry["skipped"] |= rep.skipped
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed and rep.when != "call":
        entry["details"].append(f"{rep.when} error")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "SKIP" if e["skipped"] else ("PASS" if e["ok"] else "FAIL")
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))
