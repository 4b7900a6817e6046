import numpy as np
import pytest

from moe2pc.fixed import DEFAULT
from moe2pc.runner import run_two_party
from moe2pc.sharing import reconstruct, share


def run_both(fn, **kw):
    """Run fn on both parties, return (client result, server result)."""
    res = run_two_party(fn, **kw)
    return res.client, res.server


def split(x, seed=0, cfg=DEFAULT, scale=1):
    a, b = share(x, np.random.default_rng(seed), cfg, scale)
    return a.v, b.v


def opened(pair):
    return reconstruct(*pair)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
