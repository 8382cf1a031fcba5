"""Shared pytest wiring.

The acceptance tests are named test_criterion_<n>_*; this hook collects
their outcomes and prints one verdict line per criterion at the end of
the session, so the gate can be read at a glance.
"""

import re

_verdicts = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    num = int(m.group(1))
    if report.when == "call":
        _verdicts[num] = (report.outcome == "passed", report.duration)
    elif report.when == "setup" and report.outcome == "failed":
        _verdicts[num] = (False, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_verdicts):
        ok, dur = _verdicts[num]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"CRITERION {num}: {verdict}  ({dur:.1f}s)")
