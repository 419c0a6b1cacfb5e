"""Collects per-criterion outcomes of the acceptance suite and prints one
PASS/FAIL line per criterion at the end of the run."""
import pytest

CRITERIA = {
    1: "autodiff matches central finite differences",
    2: "entropy equals ln D minus KL to uniform",
    3: "architecture invariants (simplex outputs, gates, mask locality)",
    4: "preprocessing matches brute-force oracles",
    5: "rank metrics match brute-force oracles",
    6: "zero-shot scoring contract",
    7: "training smoke tests",
    8: "parameter count below 5M at full scale",
    9: "fixture pipeline reproduces golden artifacts",
}

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry = _results.setdefault(mark.args[0], {"ok": True, "tests": 0, "notes": []})
        entry["ok"] = entry["ok"] and rep.passed
        entry["tests"] += 1
        entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        status = "PASS" if r["ok"] else "FAIL"
        notes = "; ".join(r["notes"])
        line = f"[{status}] criterion {n}: {CRITERIA.get(n, '')} ({r['tests']} checks)"
        terminalreporter.write_line(line + (f" -- {notes}" if notes else ""))
