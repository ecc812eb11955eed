"""Prints one summary line per acceptance criterion after a test run.

Acceptance tests are named test_criterion_NN_*; several tests may share a
criterion number, and the criterion passes only if all of them pass.  An
expected failure counts as a failure here: the line reports the honest
outcome, with a marker showing it was anticipated.
"""

import re

CRITERIA = {
    1: "gaussian collapse: a = 1, sigma = 1/N, zero self-energy",
    2: "density reconstruction round trip",
    3: "entry marginals match direct sampling (KS, 1% level)",
    4: "exact resolvent identities and msc reference values",
    5: "closed-form flow checks under the frozen drift",
    6: "inverse characteristic flow on matrix paths",
    7: "trace constancy and contraction along characteristics",
    8: "self-energy domination exponent",
    9: "trace error scaling in N * eta",
    10: "entrywise resolvent error scaling",
    11: "byte-identical reruns at any pool size",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")
_RESULTS = {}


def _criterion_of(nodeid):
    m = _PATTERN.search(nodeid)
    return int(m.group(1)) if m else None


def pytest_runtest_logreport(report):
    num = _criterion_of(report.nodeid)
    if num is None:
        return
    expected = hasattr(report, "wasxfail")
    if report.when == "setup" and report.failed:
        status = "error"
    elif report.when != "call":
        return
    elif report.skipped:
        status = "xfail" if expected else "skip"
    elif report.failed:
        status = "fail"
    else:
        status = "xpass" if expected else "pass"
    _RESULTS.setdefault(num, []).append((report.nodeid, status))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        outcomes = [s for _nid, s in _RESULTS[num]]
        if all(s in ("pass", "xpass") for s in outcomes):
            verdict = "PASS"
        elif any(s in ("fail", "error") for s in outcomes):
            verdict = "FAIL"
        elif any(s == "skip" for s in outcomes):
            verdict = "SKIP"
        else:
            verdict = "FAIL (expected)"
        label = CRITERIA.get(num, "unlisted criterion")
        tr.write_line(f"criterion {num:>2}  {verdict:<16} {label}")
