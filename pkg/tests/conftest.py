import numpy as np
import pytest

from geosparse.core import build_support, grid_support, seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(12345)


@pytest.fixture
def line3():
    """Support {0, 1, 2} on the real line."""
    return build_support([0.0, 1.0, 2.0], epsilon=0.01)


@pytest.fixture
def small_grid():
    return grid_support((3, 3), epsilon=0.05)


def random_measures(rng, k, n, power=1.0):
    w = rng.random((k, n)) ** power + 1e-3
    return w / w.sum(axis=1, keepdims=True)


ACCEPTANCE: dict = {}


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        # parametrized criteria accumulate: any failing case fails the criterion
        _, ok, detail = ACCEPTANCE.get(self.number, (self.title, True, ""))
        detail = f"{detail}; {self.detail}" if detail else self.detail
        ACCEPTANCE[self.number] = (self.title, ok and exc_type is None, detail)
        return False


@pytest.fixture
def criterion():
    """``with criterion(k, title) as c:`` records pass/fail (and ``c.detail``) for the summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
