import pytest

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test belongs to")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    info = _criterion_of.get(report.nodeid)
    if info is None:
        return
    n, title = info
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "tests": []})
    entry["ok"] &= report.outcome == "passed"
    entry["tests"].append((report.nodeid.split("::")[-1], report.outcome))


_criterion_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criterion_of[item.nodeid] = m.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        tr.write_line(f"criterion {n:>2} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}")


@pytest.fixture
def rng():
    import numpy as np
    return np.random.default_rng(20240611)
