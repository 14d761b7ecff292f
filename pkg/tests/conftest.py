import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from periodicsde.ou_analytic import OuModel
from periodicsde.sde_core import TrigPoly, build_duffing

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


def make_ou(alpha=1.0, sigma=1.0, T=1.0, amp=1.0):
    """1D test model: dX = (amp cos(2 pi t / T) - alpha X) dt + sigma dW."""
    return OuModel.scalar(alpha, sigma, TrigPoly.cosine(amp, T))


@pytest.fixture(scope="session")
def ou():
    return make_ou()


@pytest.fixture(scope="session")
def duffing():
    return build_duffing(0.3, 1.0, 0.8)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}")
