"""Shared fixtures and the per-criterion acceptance summary.

Tests named ``test_criterion_<N>_...`` count towards acceptance criterion N;
the terminal summary prints one PASS/FAIL/SKIP line per criterion.
"""

import re

import pytest

from catalyst_gfn import cli

CRITERIA = {
    1: "reward formula",
    2: "proportional sampling vs exact marginal (L1 <= 0.05)",
    3: "report agrees with the HER results table",
    4: "log Z convergence (<= 0.1) and DFS cross-check (1e-12)",
    5: "TB gradient vs central differences (rel <= 1e-4)",
    6: "geometry: plane basis, layer spacing, neighbour list",
    7: "relaxation: grid oracle, idempotency, a0 recovery",
    8: "filter rules",
    9: "calibration fit",
    10: "byte-identical reruns",
}
_NAME = re.compile(r"::test_criterion_(\d+)_")
_results: dict = {}
_notes: dict = {}


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    outcomes = _results.setdefault(n, {})
    prev = outcomes.get(report.nodeid)
    if report.failed:
        outcomes[report.nodeid] = "failed"
    elif report.skipped and prev != "failed":
        outcomes[report.nodeid] = "skipped"
    elif report.when == "call" and report.passed and prev is None:
        outcomes[report.nodeid] = "passed"


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        outcomes = list(_results.get(n, {}).values())
        if not outcomes:
            status = "NOT RUN"
        elif "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            skipped = outcomes.count("skipped")
            status = "PASS"
            if skipped:
                _notes.setdefault(n, []).append(f"{skipped} optional part skipped")
        line = f"criterion {n:2d}: {status:<8} {title}"
        if _notes.get(n):
            line += "  [" + "; ".join(_notes[n]) + "]"
        tr.write_line(line)


@pytest.fixture
def acceptance_note():
    """``note(n, text)`` attaches a measured value to criterion n's summary line."""

    def note(n: int, text: str) -> None:
        _notes.setdefault(n, []).append(text)

    return note


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Default-config training with seed 7; returns the run directory."""
    d = tmp_path_factory.mktemp("default_run")
    assert cli.main(["train", "--seed", "7", "--out-dir", str(d)]) == 0
    return d
