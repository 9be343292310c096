import numpy as np
import pytest


def random_lti(rng, n, m, p, radius=0.9):
    """Random stable (A, B, C, D) with spectral radius ``radius``."""
    a = rng.normal(size=(n, n))
    a *= radius / max(abs(np.linalg.eigvals(a)))
    return a, rng.normal(size=(n, m)), rng.normal(size=(p, n)), rng.normal(size=(p, m))


def simulate_lti(sys, x0, u):
    a, b, c, d = sys
    x = np.asarray(x0, dtype=float)
    y = np.empty((len(u), c.shape[0]))
    for k, uk in enumerate(u):
        y[k] = c @ x + d @ uk
        x = a @ x + b @ uk
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` stores one criterion outcome and prints it."""
    def _record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
