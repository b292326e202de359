"""Shared fixtures; the scripts import each other as siblings"""

import sys
from pathlib import Path

import numpy as np
import pytest

SCRIPTS = Path(__file__).resolve().parent.parent / "skills" / "constrained-backprop" / "scripts"
sys.path.insert(0, str(SCRIPTS))

from constraint import ConstraintKind, make_grid  # noqa: E402


@pytest.fixture
def ternary_grid():
    """{-1, 0, 1}, window variable 1"""
    return make_grid(ConstraintKind("ternary"), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, n_q=None, g=None):
    """Random strictly increasing grid with a random window variable"""
    from constraint import QuantGrid

    n_q = n_q or int(rng.integers(2, 7))
    gaps = rng.uniform(0.1, 1.0, size=n_q - 1)
    q = np.concatenate([[rng.uniform(-2.0, 0.0)], gaps]).cumsum()
    if g is None:
        g = float(rng.choice([1.0, 1.5, 2.0, 7.0, 30.0, 250.0]))
    return QuantGrid.from_values(q, g=g)
