"""Shared fixtures: full-length reference and trajectory runs, built once per session.

Acceptance tests register one line per criterion through ``criteria``; the
lines are printed in the terminal summary.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from qhydro import hydrodynamics
from qhydro.config import load_config
from qhydro.errors import NumericalFailure
from qhydro.oracle import oracle_fields, run_oracle

# snapshot times kept from the full runs
KEEP_TIMES = {0.0, 2.0, 148.0, 150.0, 152.0, 298.0, 300.0, 302.0, 398.0, 400.0, 402.0, 446.0, 448.0, 450.0}

_CRITERIA: dict[str, tuple[bool, str]] = {}


def record(key: str, passed: bool, detail: str) -> None:
    """Register (or tighten) the pass/fail line of one acceptance criterion."""
    if key in _CRITERIA:
        prev_ok, prev = _CRITERIA[key]
        passed = prev_ok and passed
        detail = f"{prev}; {detail}"
    _CRITERIA[key] = (passed, detail)


@pytest.fixture(scope="session")
def criteria():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k.split()[0])):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")


@dataclass
class QtmRun:
    coupled: bool
    settings: object
    snapshots: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    regrids: list = field(default_factory=list)
    synthesis_error: float = 0.0
    failure: Exception | None = None
    last_time: float = 0.0
    wall: float = 0.0


class _SynthesisProbe:
    """Compare synthesized |Psi|^2 with rho for 50 elements before every regrid."""

    def __init__(self, count=50):
        self.count = count
        self.worst = 0.0

    def before_regrid(self, ens):
        psi = hydrodynamics.synthesize_ensemble(ens)
        pick = np.linspace(0, len(ens) - 1, self.count).astype(int)
        rel = np.abs(np.abs(psi[pick]) ** 2 - ens.rho[pick]) / ens.rho[pick]
        self.worst = max(self.worst, float(rel.max()))


def _qtm(coupled: bool) -> QtmRun:
    settings = load_config(coupled=coupled)
    run = QtmRun(coupled, settings)
    probe = _SynthesisProbe()
    t0 = time.perf_counter()
    try:
        for frame in hydrodynamics.simulate(settings.run, hooks=probe):
            snap = frame.snapshot
            run.records.extend(frame.records)
            if frame.regrid is not None:
                run.regrids.append(frame.regrid)
            if snap.time in KEEP_TIMES:
                run.snapshots[snap.time] = snap
            run.last_time = snap.time
    except NumericalFailure as exc:
        run.failure = exc
    run.synthesis_error = probe.worst
    run.wall = time.perf_counter() - t0
    return run


@pytest.fixture(scope="session")
def qtm_uncoupled():
    return _qtm(False)


@pytest.fixture(scope="session")
def qtm_coupled():
    return _qtm(True)


def _oracle(coupled: bool):
    s = load_config(coupled=coupled)
    r = s.run
    cutoff = hydrodynamics.initialize_ensemble(r.phys, r.sup, r.case, r.hydro).density_cutoff
    out = {}
    for state in run_oracle(r.phys, r.sup, r.case, s.oracle.grid, s.oracle.dt, r.hydro.t_final, r.hydro.regrid_interval):
        if state.time in KEEP_TIMES:
            out[state.time] = (state, oracle_fields(state, r.phys.masses, cutoff, r.phys.hbar))
    return out


@pytest.fixture(scope="session")
def oracle_uncoupled():
    """time -> (OracleState, FieldSnapshot) for the uncoupled reference run."""
    return _oracle(False)


@pytest.fixture(scope="session")
def oracle_coupled():
    return _oracle(True)
