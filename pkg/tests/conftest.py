import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    monkeypatch.setenv("UNROLLCT_BACKEND", request.param)
    return request.param


# -- acceptance bookkeeping ----------------------------------------------------

CRITERIA = {}


def _entry(k):
    return CRITERIA.setdefault(k, {"ok": True, "ran": False, "notes": []})


@pytest.fixture
def note(request):
    """``note(text)`` attaches a detail line to the test's criterion."""
    marks = [m.args[0] for m in request.node.iter_markers("criterion")]

    def _note(text):
        for k in marks:
            _entry(k)["notes"].append(str(text))
    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marks = [m.args[0] for m in item.iter_markers("criterion")]
    if not marks or rep.skipped:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        for k in marks:
            e = _entry(k)
            e["ran"] = True
            e["ok"] &= rep.passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        e = CRITERIA[k]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}".rstrip())
