import re

CRITERIA = {
    1: "oracle equivalence",
    2: "gradient suite",
    3: "learning-rate schedule",
    4: "parameter accounting",
    5: "desk-scale training regression",
    6: "ablation direction",
    7: "monotonicity sweeps",
    8: "full-scale reproduction (optional)",
    9: "IRS link sanity",
}

_outcomes: dict[int, list[str]] = {}
_details: dict[int, list[str]] = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome)
    if report.when == "call":
        _details.setdefault(n, []).extend(str(v) for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        outcomes = _outcomes.get(n)
        if not outcomes:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n} {name}: {status}" + (f"  [{detail}]" if detail else ""))
