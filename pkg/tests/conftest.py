import re
from collections import OrderedDict

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_outcomes = OrderedDict()


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    prev = _outcomes.get(n, "PASS")
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.skipped and prev != "FAIL":
        _outcomes[n] = "SKIP"
    elif report.when == "call" and n not in _outcomes:
        _outcomes[n] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        terminalreporter.write_line(f"criterion {n}: {_outcomes[n]:4s}  {CRITERIA[n]}")
