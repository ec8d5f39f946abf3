import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import fracsde  # noqa: F401  (enables float64 in JAX)

settings.register_profile(
    "fracsde",
    deadline=None,
    max_examples=int(os.environ.get("FRACSDE_HYPOTHESIS_EXAMPLES", 25)),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fracsde")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ecf_check(X, ks, law, n_se=3.0):
    """Empirical characteristic function vs ``law.char_fn`` at wave vectors ``ks``.

    Returns the worst ratio ``|ecf - cf| / stderr``; the imaginary part is
    checked as well (it is zero for symmetric laws).
    """
    worst = 0.0
    for k in ks:
        phase = X @ np.asarray(k, dtype=float)
        c, s = np.cos(phase), np.sin(phase)
        n = phase.size
        cf = float(law.char_fn(k))
        se_c = c.std(ddof=1) / np.sqrt(n)
        se_s = s.std(ddof=1) / np.sqrt(n)
        worst = max(worst, abs(c.mean() - cf) / se_c, abs(s.mean()) / se_s)
    return worst


# -- acceptance reporting -----------------------------------------------------------

_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(k, title, value, bound, ok)`` records one acceptance line."""

    def record(k, title, value, bound, ok):
        line = f"CRITERION {k:>2} {'PASS' if ok else 'FAIL'}: {title}: {value} (bound {bound})"
        _CRITERIA[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA, key=lambda k: (int(str(k).split()[0]), str(k))):
            terminalreporter.write_line(_CRITERIA[k])
