"""
Complementary-pairs stability selection
=======================================
For every penalty vector in ``lambda_list`` the model is refitted on 2B
half-samples of the strata (B complementary pairs of floor(n/2) strata each).
A variable's frequency for a penalty vector is the share of converged fits in
which its coefficient is exactly non-zero; its selection probability is the
maximum frequency over penalty vectors.

The subsample schedule is drawn from the seed before any fitting, and joblib
returns results in submission order, so the output does not depend on the
number of workers.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from clr_data import MatchedDataset
from clr_errors import InvalidArgumentError, NumericalError
from clr_solver import PenaltySpec, SolverOptions, fit_penalized

logger = logging.getLogger(__name__)

FAILURE_WARNING_RATE = 0.10


@dataclass(frozen=True, eq=False)
class SubsamplePair:
    half_a: np.ndarray
    half_b: np.ndarray


@dataclass(frozen=True, eq=False)
class StabilityConfig:
    lambda_list: np.ndarray
    alpha: float = 1.0
    B: int = 100
    seed: int = 0
    workers: int = 1
    reuse_subsamples: bool = True
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        grid = np.atleast_2d(np.asarray(self.lambda_list, dtype=float))
        if grid.size == 0:
            raise InvalidArgumentError("lambda_list must hold at least one penalty vector")
        if not np.all(np.isfinite(grid)) or np.any(grid < 0):
            raise InvalidArgumentError("penalty vectors must be finite and >= 0")
        if self.B < 1:
            raise InvalidArgumentError(f"B must be >= 1, got {self.B}")
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidArgumentError(f"alpha must lie in (0, 1], got {self.alpha}")
        object.__setattr__(self, "lambda_list", grid)

    @property
    def s(self) -> int:
        return self.lambda_list.shape[0]

    def to_dict(self) -> dict:
        return {
            "lambda_list": self.lambda_list.tolist(),
            "alpha": self.alpha,
            "B": self.B,
            "seed": self.seed,
            "reuse_subsamples": self.reuse_subsamples,
            "max_iterations": self.options.max_iterations,
            "standardize": self.options.standardize,
        }


@dataclass(eq=False)
class StabilityResult:
    selection_probability: np.ndarray
    per_grid_frequency: np.ndarray
    config: StabilityConfig
    failures: np.ndarray
    n_fits: int
    warnings: List[str] = field(default_factory=list)


def draw_complementary_pairs(n: int, B: int, seed: int) -> List[SubsamplePair]:
    """B pairs of disjoint floor(n/2)-strata halves from a seeded shuffle."""
    if n < 4:
        raise InvalidArgumentError(f"need at least 4 strata for subsampling, got {n}")
    if B < 1:
        raise InvalidArgumentError(f"B must be >= 1, got {B}")
    rng = np.random.default_rng(seed)
    half = n // 2
    pairs = []
    for _ in range(B):
        perm = rng.permutation(n)
        pairs.append(SubsamplePair(np.sort(perm[:half]), np.sort(perm[half:2 * half])))
    return pairs


def penalty_vectors(lambda1: float, pf: Sequence[float],
                    multipliers: Sequence[float] = (1.0,)) -> np.ndarray:
    """Penalty vectors lambda1 * m * pf, one row per multiplier."""
    pf = np.asarray(pf, dtype=float)
    return np.array([lambda1 * m * pf for m in multipliers])


def _selected_on(data: MatchedDataset, strata: np.ndarray, lambdas: np.ndarray,
                 alpha: float, options: SolverOptions) -> Optional[np.ndarray]:
    fit = fit_penalized(data.subset(strata), PenaltySpec(lambdas, alpha), options)
    if not fit.converged:
        return None
    return fit.beta != 0


def _schedule(data: MatchedDataset, config: StabilityConfig) -> List[List[SubsamplePair]]:
    if config.reuse_subsamples:
        pairs = draw_complementary_pairs(data.n, config.B, config.seed)
        return [pairs] * config.s
    children = np.random.SeedSequence(config.seed).spawn(config.s)
    return [
        draw_complementary_pairs(data.n, config.B, int(child.generate_state(1)[0]))
        for child in children
    ]


def stable_clr_g(data: MatchedDataset, config: StabilityConfig) -> StabilityResult:
    """Stability selection over the penalty vectors of ``config.lambda_list``."""
    if config.lambda_list.shape[1] != data.n_blocks:
        raise InvalidArgumentError(
            f"penalty vectors have length {config.lambda_list.shape[1]}, "
            f"data has {data.n_blocks} block(s)"
        )
    schedule = _schedule(data, config)
    jobs = [
        (v, half)
        for v in range(config.s)
        for pair in schedule[v]
        for half in (pair.half_a, pair.half_b)
    ]
    logger.info("stability selection: %d fits (B=%d, s=%d, workers=%d)",
                len(jobs), config.B, config.s, config.workers)
    outcomes = Parallel(n_jobs=config.workers)(
        delayed(_selected_on)(data, half, config.lambda_list[v], config.alpha, config.options)
        for v, half in jobs
    )

    counts = np.zeros((config.s, data.p))
    fitted = np.zeros(config.s, dtype=int)
    for (v, _), selected in zip(jobs, outcomes):
        if selected is not None:
            counts[v] += selected
            fitted[v] += 1
    failures = 2 * config.B - fitted

    if fitted.sum() == 0:
        raise NumericalError("every stability-selection fit failed to converge")

    warnings: List[str] = []
    for v in range(config.s):
        if failures[v] > FAILURE_WARNING_RATE * 2 * config.B:
            msg = (f"penalty vector {config.lambda_list[v].tolist()}: "
                   f"{failures[v]} of {2 * config.B} fits did not converge")
            logger.warning(msg)
            warnings.append(msg)

    with np.errstate(invalid="ignore", divide="ignore"):
        frequency = np.where(fitted[:, None] > 0, counts / fitted[:, None], 0.0)
    return StabilityResult(
        selection_probability=frequency.max(axis=0),
        per_grid_frequency=frequency,
        config=config,
        failures=failures,
        n_fits=len(jobs),
        warnings=warnings,
    )


def select(result: StabilityResult, threshold: float) -> np.ndarray:
    """Indices whose selection probability is at least ``threshold``."""
    if not (0.0 < threshold < 1.0):
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    return np.flatnonzero(result.selection_probability >= threshold)


def stability_table(result: StabilityResult, data: MatchedDataset,
                    threshold: float) -> pd.DataFrame:
    """One row per variable: block, per-grid frequencies, probability, selected flag."""
    frame = pd.DataFrame({
        "variable": list(data.column_names),
        "block": data.block_of_column + 1,
    })
    for v in range(result.per_grid_frequency.shape[0]):
        frame[f"freq_{v + 1}"] = result.per_grid_frequency[v]
    frame["selection_probability"] = result.selection_probability
    selected = np.zeros(data.p, dtype=bool)
    selected[select(result, threshold)] = True
    frame["selected"] = selected.astype(int)
    return frame
