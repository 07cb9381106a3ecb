import numpy as np
import pytest

from adapam import ndmath as nm


def fd_coordinate_errors(f, analytic, x0, n_probes, rng, h=1e-6, floor=1e-5):
    """Relative errors of ``analytic`` against central differences of ``f`` at random coordinates."""
    x0 = np.asarray(x0, dtype=np.float64)
    idx = rng.choice(x0.size, size=min(n_probes, x0.size), replace=False)
    errs = []
    for i in idx:
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        num = (f(xp) - f(xm)) / (2 * h)
        a = analytic.flat[i]
        errs.append(abs(a - num) / max(abs(a), abs(num), floor))
    return np.array(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net():
    return nm.Network.init((5, 7, 4), seed=3)


# acceptance criteria register a one-line verdict here; the lines are printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
