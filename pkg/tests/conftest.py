"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

CRITERIA = {
    1: "basis dimension and closure",
    2: "oracle equivalence",
    3: "norm conservation",
    4: "gradient correctness",
    5: "noiseless preparation at desk scale",
    6: "coupling-noise robustness",
    7: "statistical stability",
    8: "perturbative machinery",
    9: "ZZ robustness",
    10: "sensing identities",
    11: "reproducibility",
}

_results: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    notes = "; ".join(v for k, v in item.user_properties if k == "measured")
    _results.setdefault(mark.args[0], []).append((item.name, rep.passed, notes))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, title in CRITERIA.items():
        got = _results.get(k)
        if not got:
            continue
        ok = all(passed for _, passed, _ in got)
        notes = "; ".join(n for _, _, n in got if n)
        tr.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{notes}]" if notes else ""))
