from __future__ import annotations

import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chaintrack.scenario import RunConfig, run_reference  # noqa: E402


@pytest.fixture(scope="module")
def reference_world():
    """Reference scenario (4 records) plus a second instance over 2 records; read-only."""
    return run_reference(RunConfig(), records=(4, 2))


@pytest.fixture
def fresh_world():
    return run_reference(RunConfig(), records=(4,))


# -- acceptance summary: one pass/fail line per criterion ---------------------------------

AC_TITLES = {
    1: "reference scenario reproduction",
    2: "event ledger counts",
    3: "tamper detection",
    4: "time-window check",
    5: "address lineage",
    6: "multi-client consistency",
    7: "aggregation queries",
    8: "determinism and canonicalization",
}
_AC_NODE = re.compile(r"test_acceptance\.py::test_ac(\d+)_")
_ac_outcomes: dict[int, bool] = {}


def pytest_runtest_logreport(report):
    m = _AC_NODE.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        _ac_outcomes[n] = _ac_outcomes.get(n, True) and not report.failed


def pytest_terminal_summary(terminalreporter):
    if not _ac_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(AC_TITLES):
        if n in _ac_outcomes:
            verdict = "PASS" if _ac_outcomes[n] else "FAIL"
            terminalreporter.write_line(f"AC{n} {AC_TITLES[n]}: {verdict}")
