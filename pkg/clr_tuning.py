"""
Data-adaptive penalty parameters
================================
The penalty vector is decomposed as lambda = lambda1 * (1, pf_2, ..., pf_P):
``lambda1`` is the overall level chosen by cross-validated deviance and the
penalty factors ``pf`` set the relative penalty of each block against the
first one.

Cross-validation folds are made of whole strata; a matched set is never split.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from clr_data import MatchedDataset, neg_log_likelihood
from clr_errors import InvalidArgumentError, NumericalError
from clr_solver import FitResult, PenaltySpec, SolverOptions, fit_penalized, lambda_max

logger = logging.getLogger(__name__)

StepOneType = Literal["separate", "combined"]

DEFAULT_PF_CAP = 100.0
DEFAULT_GRID_POINTS = 20
DEFAULT_GRID_RATIO = 1e-3


@dataclass(frozen=True, eq=False)
class PenaltyFactors:
    """Relative block penalties; the first entry is always 1."""

    pf: np.ndarray
    cap: float = DEFAULT_PF_CAP

    def __post_init__(self):
        pf = np.asarray(self.pf, dtype=float)
        if pf.ndim != 1 or pf.size == 0:
            raise InvalidArgumentError("penalty factors must be a non-empty vector")
        if not np.all(np.isfinite(pf)) or np.any(pf <= 0) or np.any(pf > self.cap * (1 + 1e-12)):
            raise InvalidArgumentError(
                f"penalty factors must lie in (0, {self.cap}], got {pf.tolist()}"
            )
        if abs(pf[0] - 1.0) > 1e-12:
            raise InvalidArgumentError(f"first penalty factor must be 1, got {pf[0]}")
        object.__setattr__(self, "pf", pf)

    @classmethod
    def ones(cls, n_blocks: int) -> "PenaltyFactors":
        return cls(np.ones(n_blocks))


@dataclass(frozen=True, eq=False)
class CvPlan:
    """Assignment of strata to folds."""

    n_folds: int
    fold_of: np.ndarray

    def folds(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.fold_of == f) for f in range(self.n_folds)]

    def training(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)


def make_cv_plan(data: MatchedDataset, n_folds: int = 5, seed: int = 0) -> CvPlan:
    """Seeded random partition of strata into folds whose sizes differ by at most one."""
    if not 2 <= n_folds <= data.n:
        raise InvalidArgumentError(f"n_folds must lie in [2, {data.n}], got {n_folds}")
    perm = np.random.default_rng(seed).permutation(data.n)
    fold_of = np.empty(data.n, dtype=int)
    fold_of[perm] = np.arange(data.n) % n_folds
    return CvPlan(n_folds, fold_of)


# ============================================================================
# 1. Cross-validated deviance
# ============================================================================

def _fold_deviance(data: MatchedDataset, spec: PenaltySpec, plan: CvPlan, fold: int,
                   options: SolverOptions):
    train = data.subset(plan.training(fold))
    fit = fit_penalized(train, spec, options)
    held_out = data.subset(np.flatnonzero(plan.fold_of == fold))
    return 2.0 * neg_log_likelihood(fit.beta, held_out), fit.converged


def _deviance_matrix(data: MatchedDataset, specs: Sequence[PenaltySpec], plan: CvPlan,
                     options: SolverOptions, workers: int) -> np.ndarray:
    """Held-out deviance per (spec, fold); NaN where the training fit did not converge."""
    jobs = [(i, f) for i in range(len(specs)) for f in range(plan.n_folds)]
    results = Parallel(n_jobs=workers)(
        delayed(_fold_deviance)(data, specs[i], plan, f, options) for i, f in jobs
    )
    table = np.empty((len(specs), plan.n_folds))
    for (i, f), (deviance, converged) in zip(jobs, results):
        table[i, f] = deviance if converged else np.nan
    return table


def cv_deviance(data: MatchedDataset, spec: PenaltySpec, plan: CvPlan,
                options: SolverOptions = SolverOptions(), workers: int = 1) -> float:
    """Sum over folds of 2 * (-log L) on the held-out strata, fitted on the rest."""
    if plan.n_folds > data.n or plan.fold_of.shape != (data.n,):
        raise InvalidArgumentError("CV plan does not match the dataset")
    row = _deviance_matrix(data, [spec], plan, options, workers)[0]
    failed = np.flatnonzero(np.isnan(row))
    if failed.size:
        raise NumericalError(
            f"training fit for fold {int(failed[0])} did not converge "
            f"(lambdas={spec.lambdas.tolist()})"
        )
    return float(row.sum())


@dataclass
class LambdaSearch:
    lambda1: float
    table: pd.DataFrame
    warnings: List[str] = field(default_factory=list)
    lambda_min: Optional[float] = None


def default_lambda_grid(data: MatchedDataset, pf: PenaltyFactors, alpha: float = 1.0,
                        n_points: int = DEFAULT_GRID_POINTS, ratio: float = DEFAULT_GRID_RATIO,
                        standardize: bool = True) -> np.ndarray:
    """Geometric grid from lambda_max down to lambda_max * ratio (descending)."""
    top = float(np.max(lambda_max(data, alpha, standardize, pf.pf)))
    if top <= 0:
        raise NumericalError("score at zero vanishes; no penalty grid can be built")
    return np.geomspace(top, top * ratio, n_points)


def find_default_lambda(data: MatchedDataset, pf: PenaltyFactors, alpha: float,
                        grid: Sequence[float], plan: CvPlan,
                        options: SolverOptions = SolverOptions(), workers: int = 1,
                        skip_failed: bool = False, se_fraction: float = 0.0) -> LambdaSearch:
    """Pick the overall level lambda1 minimizing CV deviance of lambda1 * pf.

    Ties go to the smaller lambda1. With ``skip_failed`` a grid point whose
    fold fits do not converge gets infinite deviance instead of raising.

    ``se_fraction`` > 0 picks the largest lambda1 whose deviance lies within
    ``se_fraction`` standard errors of the minimum (1.0 is the one-SE rule);
    the standard error of the summed deviance is sqrt(K) times the standard
    deviation of the K per-fold deviances at the minimum.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(~np.isfinite(grid)) or np.any(grid <= 0):
        raise InvalidArgumentError("lambda grid must be a non-empty vector of positive values")
    if pf.pf.size != data.n_blocks:
        raise InvalidArgumentError(
            f"{pf.pf.size} penalty factor(s) for {data.n_blocks} block(s)"
        )
    if not (np.isfinite(se_fraction) and se_fraction >= 0):
        raise InvalidArgumentError(f"se_fraction must be finite and >= 0, got {se_fraction}")

    ordered = np.sort(grid)
    specs = [PenaltySpec.from_factors(lam, pf.pf, alpha) for lam in ordered]
    matrix = _deviance_matrix(data, specs, plan, options, workers)

    warnings: List[str] = []
    failed = np.isnan(matrix).any(axis=1)
    if failed.any():
        first = int(np.flatnonzero(failed)[0])
        if not skip_failed:
            fold = int(np.flatnonzero(np.isnan(matrix[first]))[0])
            raise NumericalError(
                f"training fit for fold {fold} did not converge at lambda1={ordered[first]:.6g}"
            )
        msg = f"{int(failed.sum())} grid point(s) skipped after non-converged fold fits"
        logger.warning(msg)
        warnings.append(msg)
        if failed.all():
            raise NumericalError("no grid point produced converged fits on every fold")

    deviances = np.where(failed, np.inf, np.nansum(matrix, axis=1))
    best = int(np.argmin(deviances))
    chosen = best
    if se_fraction > 0:
        se = math.sqrt(plan.n_folds) * float(np.std(matrix[best], ddof=1))
        chosen = int(np.flatnonzero(deviances <= deviances[best] + se_fraction * se).max())
    table = pd.DataFrame({"lambda1": ordered, "cv_deviance": deviances})
    logger.info("lambda1=%.6g chosen (cv deviance %.6g, minimum %.6g at %.6g)",
                ordered[chosen], deviances[chosen], deviances[best], ordered[best])
    return LambdaSearch(float(ordered[chosen]), table, warnings, float(ordered[best]))


# ============================================================================
# 2. Penalty factors
# ============================================================================

@dataclass
class PenaltyFactorReport:
    factors: PenaltyFactors
    block_means: np.ndarray
    type_step1: str
    tentative_lambdas: List[float]
    tentative_fits: List[FitResult]
    warnings: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "block": np.arange(1, self.factors.pf.size + 1),
            "penalty_factor": self.factors.pf,
            "mean_abs_coef": self.block_means,
        })


def factors_from_means(block_means: Sequence[float], cap: float = DEFAULT_PF_CAP):
    """Penalty inversely proportional to the block mean, normalized to block 1.

    pf_i = min(m_1 / m_i, cap), so a block with m_i = 0 gets exactly ``cap``.
    If block 1 itself is all zero, m_1 is taken as m_max / cap. Returns the
    factors and the indices of the blocks that hit the cap.
    """
    means = np.asarray(block_means, dtype=float)
    strongest = means.max()
    if strongest <= 0:
        raise NumericalError("no signal detected; penalty factors undefined")
    reference = means[0] if means[0] > 0 else strongest / cap
    with np.errstate(divide="ignore"):
        ratio = np.where(means > 0, reference / means, np.inf)
    ratio[0] = 1.0
    capped = np.flatnonzero(ratio > cap)
    return PenaltyFactors(np.minimum(ratio, cap), cap=cap), capped


def _tentative_fit(data: MatchedDataset, alpha: float, plan: CvPlan,
                   options: SolverOptions, workers: int, skip_failed: bool):
    pf = PenaltyFactors.ones(data.n_blocks)
    grid = default_lambda_grid(data, pf, alpha, standardize=options.standardize)
    search = find_default_lambda(data, pf, alpha, grid, plan, options, workers, skip_failed)
    fit = fit_penalized(data, PenaltySpec.from_factors(search.lambda1, pf.pf, alpha), options)
    return search, fit


def default_pf(data: MatchedDataset, alpha: float = 1.0, type_step1: StepOneType = "combined",
               plan: Optional[CvPlan] = None, pf_cap: float = DEFAULT_PF_CAP,
               options: SolverOptions = SolverOptions(), workers: int = 1,
               skip_failed: bool = False) -> PenaltyFactorReport:
    """Data-adaptive penalty factors from tentative elastic-net fits.

    ``combined`` fits one tentative model on all blocks; ``separate`` fits one
    model per block using only that block's columns. Each tentative model's
    lambda is chosen by :func:`find_default_lambda` on the default grid.
    """
    if type_step1 not in ("separate", "combined"):
        raise InvalidArgumentError(f"type_step1 must be 'separate' or 'combined', got {type_step1!r}")
    if plan is None:
        plan = make_cv_plan(data)

    searches = []
    if type_step1 == "combined":
        search, fit = _tentative_fit(data, alpha, plan, options, workers, skip_failed)
        searches.append(search)
        fits = [fit]
        means = np.array([np.abs(fit.beta[sl]).mean() for sl in data.block_slices])
    else:
        fits, means = [], []
        for b in range(data.n_blocks):
            search, fit = _tentative_fit(data.select_block(b), alpha, plan, options,
                                         workers, skip_failed)
            searches.append(search)
            fits.append(fit)
            means.append(np.abs(fit.beta).mean())
        means = np.array(means)

    factors, capped = factors_from_means(means, pf_cap)
    warnings = [w for s in searches for w in s.warnings]
    for b in capped:
        msg = (f"block {b + 1} has mean |beta| {means[b]:.3g}; "
               f"penalty factor capped at {factors.pf[b]:g}")
        logger.warning(msg)
        warnings.append(msg)
    if means[0] == 0:
        msg = "block 1 has no non-zero coefficient; other factors are relative to m_max / pf_cap"
        logger.warning(msg)
        warnings.append(msg)
    return PenaltyFactorReport(factors, means, type_step1,
                               [s.lambda1 for s in searches], fits, warnings)


def average_default_pf(data: MatchedDataset, alpha: float = 1.0,
                       type_step1: StepOneType = "combined", n_folds: int = 5,
                       seeds: Sequence[int] = (0, 1, 2), pf_cap: float = DEFAULT_PF_CAP,
                       options: SolverOptions = SolverOptions(), workers: int = 1,
                       skip_failed: bool = False) -> PenaltyFactorReport:
    """Run :func:`default_pf` once per CV seed and average the factors.

    The heuristic depends on the random folds, so repeated runs are averaged
    and renormalized to the first block.
    """
    reports = [
        default_pf(data, alpha, type_step1, make_cv_plan(data, n_folds, seed), pf_cap,
                   options, workers, skip_failed)
        for seed in seeds
    ]
    mean_pf = np.mean([r.factors.pf for r in reports], axis=0)
    return PenaltyFactorReport(
        PenaltyFactors(mean_pf / mean_pf[0], cap=pf_cap),
        np.mean([r.block_means for r in reports], axis=0),
        type_step1,
        [lam for r in reports for lam in r.tentative_lambdas],
        [fit for r in reports for fit in r.tentative_fits],
        [w for r in reports for w in r.warnings],
    )


def penalty_summary(report: PenaltyFactorReport) -> Dict[str, object]:
    return {
        "penalty_factors": report.factors.pf.tolist(),
        "block_means": report.block_means.tolist(),
        "type_step1": report.type_step1,
        "tentative_lambdas": report.tentative_lambdas,
    }
