"""Shared dataset builders for the test suite."""

import os
from typing import Optional, Sequence

import numpy as np
import pytest

from clr_data import MatchedDataset, Stratum

RUN_SLOW = os.getenv("BLOCKCLR_RUN_SLOW") == "1"


def make_matched(n: int, p: int, k: int = 1, seed: int = 0,
                 blocks: Optional[Sequence[int]] = None,
                 beta: Optional[np.ndarray] = None, scale: float = 1.0) -> MatchedDataset:
    """n strata of 1 case + k controls; the case is drawn from the softmax of X @ beta."""
    rng = np.random.default_rng(seed)
    m = k + 1
    X = scale * rng.standard_normal((n * m, p))
    beta = np.zeros(p) if beta is None else np.asarray(beta, dtype=float)
    strata = []
    for s in range(n):
        rows = list(range(s * m, (s + 1) * m))
        eta = X[rows] @ beta
        prob = np.exp(eta - eta.max())
        prob /= prob.sum()
        case = rows[int(rng.choice(m, p=prob))]
        strata.append(Stratum(f"s{s}", case, tuple(r for r in rows if r != case)))
    return MatchedDataset(tuple(strata), X, tuple(blocks) if blocks else (p,))


def pairs_with_signal(n: int = 60, seed: int = 0) -> MatchedDataset:
    """Two blocks of 4; block 1 carries the signal, block 2 is noise."""
    beta = np.array([1.5, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    return make_matched(n, 8, k=1, seed=seed, blocks=(4, 4), beta=beta)


@pytest.fixture
def small_data() -> MatchedDataset:
    return make_matched(12, 3, k=2, seed=3, blocks=(2, 1), beta=np.array([0.8, -0.5, 0.3]))


@pytest.fixture
def signal_data() -> MatchedDataset:
    return pairs_with_signal()


@pytest.fixture
def tight_options():
    from clr_solver import SolverOptions

    return SolverOptions(max_iterations=20000, rel_tolerance=1e-12, coef_tolerance=1e-9)
