import dataclasses
import time

import pytest

from ringtrap import fields as F
from ringtrap.geometry import RingLayoutParams, build_ring_layout
from ringtrap.pipeline import DEMO_CONFIG, load_config, run_pipeline


@pytest.fixture(scope="session")
def base_model():
    return build_ring_layout()


@pytest.fixture(scope="session")
def ring(base_model):
    return F.find_minimum_ring(base_model)


@pytest.fixture(scope="session")
def model(base_model, ring):
    """Default layout with sites moved onto the pseudopotential minimum."""
    return ring.apply(base_model)


@pytest.fixture(scope="session")
def sym_ring():
    m = build_ring_layout(RingLayoutParams(loading_hole_diameter=0.0))
    return F.find_minimum_ring(m)


@pytest.fixture(scope="session")
def sym_model(sym_ring):
    """Hole-free layout, exactly rotationally symmetric."""
    return sym_ring.apply(build_ring_layout(RingLayoutParams(loading_hole_diameter=0.0)))


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    cfg = dataclasses.replace(load_config(DEMO_CONFIG), out=out)
    return run_pipeline(cfg)


@pytest.fixture(scope="session")
def ideal_crystal(sym_model, sym_ring):
    """400 ions in the hole-free model, no stray, no control voltages."""
    from ringtrap import crystal as C

    return C.solve_crystal(sym_model, n=400, ring=sym_ring)


# --------------------------------------------------------------------------
# acceptance summary

_VERDICTS: list[str] = []
_T0 = time.monotonic()
SUITE_BUDGET = 600.0  # s


@pytest.fixture(scope="session")
def verdicts():
    return _VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    elapsed = time.monotonic() - _T0
    terminalreporter.section("acceptance criteria")
    for line in _VERDICTS:
        terminalreporter.write_line(line)
    ok = "PASS" if elapsed < SUITE_BUDGET else "FAIL"
    terminalreporter.write_line(f"criterion 9 runtime: {ok} (session {elapsed:.0f} s, budget {SUITE_BUDGET:.0f} s)")
