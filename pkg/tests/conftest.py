import warnings

import numpy as np
import pytest
from hypothesis import settings

from stratext.game import Externality, ExternalityModel, GameInstance, OutOfRangeWarning

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

SMOOTH = (Externality.PROPORTIONAL, Externality.CONGESTION)


def beta_cap(variant, alpha, k):
    return ExternalityModel(variant, 0.0, k).beta_threshold(alpha)


def random_instance(rng, variant, k=None, d=None, alpha=None, beta=None, k_max=None):
    """In-range random instance; beta defaults to a random fraction of the concavity cap."""
    k = int(rng.integers(1, 5)) if k is None else k
    d = int(rng.integers(1, 4)) if d is None else d
    alpha = float(rng.uniform(0.5, 2.0)) if alpha is None else alpha
    if beta is None:
        cap = beta_cap(variant, alpha, k)
        beta = float(rng.uniform(0, 0.9 * min(cap, 2 * alpha))) if k > 1 else 0.0
    k_max = k if k_max is None else k_max
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfRangeWarning)
        return GameInstance.build(rng.uniform(0, 1, (k_max, d)), rng.choice([-1, 1], k_max), k,
                                  alpha, beta, variant)


def random_omega(rng, d, r=2.0):
    w = rng.normal(size=d)
    return w / np.linalg.norm(w) * r * rng.uniform(0.1, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance verdict; printed now and again in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
