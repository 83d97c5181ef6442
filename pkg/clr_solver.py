"""
Block-penalized conditional logistic regression
===============================================
Minimizes

    -loglik(beta) + sum_b lambda_b * sum_{j in b} [alpha |beta_j| + (1 - alpha)/2 beta_j^2]

by proximal gradient descent with backtracking (optionally accelerated with
monotone restarts). The ridge part is folded into the smooth term; the L1
part is handled by soft-thresholding, which produces exact zeros.

Penalties act on the standardized scale when ``standardize`` is on; the
returned coefficients are always on the original covariate scale.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from clr_data import (
    Coefficients,
    MatchedDataset,
    gradient,
    information_product,
    neg_log_likelihood,
)
from clr_errors import InvalidArgumentError

logger = logging.getLogger(__name__)


# ============================================================================
# 1. Penalty specification and options
# ============================================================================

@dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Per-block penalty levels plus elastic-net mixing.

    ``lambdas[b]`` is the total penalty level of block b; it is split into an
    L1 weight ``lambdas[b] * alpha`` and an L2 weight ``lambdas[b] * (1 - alpha)``.
    """

    lambdas: np.ndarray
    alpha: float = 1.0
    unpenalized_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        lambdas = np.atleast_1d(np.asarray(self.lambdas, dtype=float))
        if lambdas.ndim != 1 or lambdas.size == 0:
            raise InvalidArgumentError("lambdas must be a non-empty vector")
        if not np.all(np.isfinite(lambdas)) or np.any(lambdas < 0):
            raise InvalidArgumentError(f"lambdas must be finite and >= 0, got {lambdas.tolist()}")
        if not (0.0 < float(self.alpha) <= 1.0):
            raise InvalidArgumentError(f"alpha must lie in (0, 1], got {self.alpha}")
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.unpenalized_mask is not None:
            object.__setattr__(self, "unpenalized_mask",
                               np.asarray(self.unpenalized_mask, dtype=bool))

    @classmethod
    def from_factors(cls, lambda1: float, penalty_factors: Sequence[float],
                     alpha: float = 1.0) -> "PenaltySpec":
        """lambda = lambda1 * (1, pf_2, ..., pf_P)."""
        return cls(float(lambda1) * np.asarray(penalty_factors, dtype=float), alpha)

    def check_blocks(self, block_sizes: Sequence[int]) -> None:
        if self.lambdas.size != len(block_sizes):
            raise InvalidArgumentError(
                f"penalty has {self.lambdas.size} level(s) but the data has "
                f"{len(block_sizes)} block(s)"
            )
        p = int(sum(block_sizes))
        if self.unpenalized_mask is not None and self.unpenalized_mask.shape != (p,):
            raise InvalidArgumentError(
                f"unpenalized mask has shape {self.unpenalized_mask.shape}, expected ({p},)"
            )

    def column_weights(self, block_sizes: Sequence[int]):
        """Per-column (L1, L2) weights."""
        self.check_blocks(block_sizes)
        per_column = np.repeat(self.lambdas, block_sizes)
        l1 = per_column * self.alpha
        l2 = per_column * (1.0 - self.alpha)
        if self.unpenalized_mask is not None:
            l1 = np.where(self.unpenalized_mask, 0.0, l1)
            l2 = np.where(self.unpenalized_mask, 0.0, l2)
        return l1, l2

    def to_dict(self) -> dict:
        out = {"lambdas": self.lambdas.tolist(), "alpha": self.alpha}
        if self.unpenalized_mask is not None:
            out["unpenalized"] = np.flatnonzero(self.unpenalized_mask).tolist()
        return out


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 1000
    rel_tolerance: float = 1e-8
    coef_tolerance: float = 1e-6
    standardize: bool = True
    accelerate: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be >= 1")
        if self.rel_tolerance <= 0 or self.coef_tolerance <= 0:
            raise InvalidArgumentError("tolerances must be positive")


@dataclass(frozen=True, eq=False)
class Standardization:
    """Column centering/scaling used inside a fit.

    Columns with zero variance have ``active`` False; their coefficient is
    held at 0.
    """

    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray

    @classmethod
    def identity(cls, p: int) -> "Standardization":
        return cls(np.zeros(p), np.ones(p), np.ones(p, dtype=bool))

    @classmethod
    def from_data(cls, X: np.ndarray, standardize: bool) -> "Standardization":
        spread = X.std(axis=0)
        active = spread > 0
        if standardize:
            return cls(X.mean(axis=0), np.where(active, spread, 1.0), active)
        return cls(np.zeros(X.shape[1]), np.ones(X.shape[1]), active)

    def transform(self, X: np.ndarray) -> np.ndarray:
        Z = (X - self.center) / self.scale
        Z[:, ~self.active] = 0.0
        return Z

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist(),
                "constant_columns": np.flatnonzero(~self.active).tolist()}


@dataclass(eq=False)
class FitResult:
    beta: Coefficients
    objective: float
    converged: bool
    iterations: int
    nonzero: np.ndarray
    penalty: PenaltySpec
    standardization: Standardization
    objective_trace: List[float] = field(default_factory=list)
    message: str = ""
    warnings: List[str] = field(default_factory=list)


# ============================================================================
# 2. Penalty evaluation
# ============================================================================

def penalty_value(beta: Coefficients, spec: PenaltySpec, block_sizes: Sequence[int],
                  scale: Optional[np.ndarray] = None) -> float:
    """Elastic-net penalty sum_b lambda_b sum_j [alpha|b_j| + (1-alpha)/2 b_j^2].

    ``scale`` evaluates the penalty on standardized coefficients b = beta * scale,
    which is what a standardized fit minimizes.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (int(sum(block_sizes)),):
        raise InvalidArgumentError(
            f"coefficient vector has shape {beta.shape}, expected ({sum(block_sizes)},)"
        )
    l1, l2 = spec.column_weights(block_sizes)
    b = beta if scale is None else beta * scale
    return float(np.sum(l1 * np.abs(b)) + 0.5 * np.sum(l2 * b * b))


def soft_threshold(v: np.ndarray, threshold: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


def lambda_max(data: MatchedDataset, alpha: float = 1.0, standardize: bool = True,
               penalty_factors: Optional[Sequence[float]] = None) -> np.ndarray:
    """Per-block smallest penalty level at which beta = 0 satisfies the L1 condition.

    Computed from the score at zero on the same scale the solver penalizes.
    With ``penalty_factors`` the value of block b is divided by its factor, so
    ``max(lambda_max(...))`` is the smallest overall level lambda1 zeroing
    every block.
    """
    if not (0.0 < alpha <= 1.0):
        raise InvalidArgumentError(f"alpha must lie in (0, 1], got {alpha}")
    std = Standardization.from_data(data.covariates, standardize)
    score = np.abs(gradient(np.zeros(data.p), data)) / std.scale
    score[~std.active] = 0.0
    per_block = np.array([score[sl].max() for sl in data.block_slices]) / alpha
    if penalty_factors is not None:
        per_block = per_block / np.asarray(penalty_factors, dtype=float)
    return per_block


# ============================================================================
# 3. Proximal gradient solver
# ============================================================================

def _top_curvature(data: MatchedDataset, n_iter: int = 15) -> float:
    """Largest eigenvalue of the information at zero by power iteration."""
    zero = np.zeros(data.p)
    v = np.ones(data.p) / math.sqrt(data.p)
    value = 0.0
    for _ in range(n_iter):
        w = information_product(zero, data, v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        value = float(v @ w)
        v = w / norm
    return max(value, norm)


def fit_penalized(data: MatchedDataset, spec: PenaltySpec,
                  options: SolverOptions = SolverOptions()) -> FitResult:
    """Fit the block-penalized conditional logistic model, starting from beta = 0."""
    spec.check_blocks(data.block_sizes)
    std = Standardization.from_data(data.covariates, options.standardize)
    warnings: List[str] = []
    if not np.all(std.active):
        constant = [data.column_names[j] for j in np.flatnonzero(~std.active)]
        msg = f"{len(constant)} constant column(s) held at 0: {', '.join(constant[:10])}"
        logger.warning(msg)
        warnings.append(msg)

    work = data.with_covariates(std.transform(data.covariates))
    l1, l2 = spec.column_weights(data.block_sizes)

    def smooth(b):
        return neg_log_likelihood(b, work) + 0.5 * float(np.sum(l2 * b * b))

    def smooth_grad(b):
        return gradient(b, work) + l2 * b

    def total(b, f_b):
        return f_b + float(np.sum(l1 * np.abs(b)))

    p = data.p
    x = np.zeros(p)
    f_x = smooth(x)
    F_x = total(x, f_x)
    trace = [F_x]

    # Initial step from the curvature at zero; backtracking corrects it.
    curvature = _top_curvature(work) + float(l2.max(initial=0.0))
    step = 1.0 / max(curvature, 1e-12)

    y, f_y = x, f_x
    momentum = 1.0
    converged = False
    message = f"reached max_iterations={options.max_iterations}"
    iteration = 0

    for iteration in range(1, options.max_iterations + 1):
        g = smooth_grad(y)
        while True:
            z = soft_threshold(y - step * g, step * l1)
            d = z - y
            f_z = smooth(z)
            if f_z <= f_y + g @ d + (d @ d) / (2.0 * step) + 1e-12 * abs(f_y):
                break
            step *= 0.5
            if step < 1e-20:
                message = "line search failed: step size underflow"
                break
        if step < 1e-20:
            break

        F_z = total(z, f_z)
        if F_z > F_x:
            if y is x:
                # Plain proximal step cannot improve any further.
                converged = abs(F_z - F_x) <= 1e-10 * max(1.0, abs(F_x))
                message = "no descent from current iterate"
                break
            # Momentum overshoot: restart from the last accepted point.
            y, f_y, momentum = x, f_x, 1.0
            continue

        coef_change = max(float(np.max(np.abs(z - x), initial=0.0)),
                          float(np.max(np.abs(d), initial=0.0)))
        rel_change = abs(F_x - F_z) / max(abs(F_x), 1e-300)

        if options.accelerate:
            next_momentum = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum * momentum))
            y = z + ((momentum - 1.0) / next_momentum) * (z - x)
            momentum = next_momentum
        else:
            y = z
        x, f_x, F_x = z, f_z, F_z
        f_y = f_x if y is x else smooth(y)
        trace.append(F_x)

        if rel_change < options.rel_tolerance and coef_change < options.coef_tolerance:
            converged = True
            message = "converged"
            break

    beta = np.where(std.active, x / std.scale, 0.0)
    objective = neg_log_likelihood(beta, data) + penalty_value(beta, spec, data.block_sizes,
                                                               scale=std.scale)
    if not converged:
        warn = f"fit did not converge after {iteration} iteration(s): {message}"
        logger.warning(warn)
        warnings.append(warn)

    return FitResult(
        beta=beta,
        objective=objective,
        converged=converged,
        iterations=iteration,
        nonzero=np.flatnonzero(beta != 0),
        penalty=spec,
        standardization=std,
        objective_trace=trace,
        message=message,
        warnings=warnings,
    )


# ============================================================================
# 4. Optimality certificate
# ============================================================================

@dataclass
class KktViolation:
    index: int
    beta: float
    residual: float
    bound: float


@dataclass
class KktReport:
    violations: List[KktViolation] = field(default_factory=list)
    max_residual: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def kkt_check(fit: FitResult, data: MatchedDataset, spec: PenaltySpec,
              tol: float = 1e-4) -> KktReport:
    """Check the subgradient conditions on the scale the fit penalized.

    With g_j the smooth gradient (score plus ridge term):
      beta_j != 0  ->  |g_j + w1_j sign(beta_j)| <= tol
      beta_j == 0  ->  |g_j| <= w1_j + tol
    """
    std = fit.standardization
    l1, l2 = spec.column_weights(data.block_sizes)
    b = fit.beta * std.scale
    g = gradient(fit.beta, data) / std.scale + l2 * b
    report = KktReport()
    for j in range(data.p):
        if not std.active[j]:
            if fit.beta[j] != 0:
                report.violations.append(KktViolation(j, float(fit.beta[j]), math.inf, 0.0))
            continue
        if b[j] != 0:
            residual = abs(g[j] + l1[j] * np.sign(b[j]))
            bound = tol
        else:
            residual = abs(g[j])
            bound = l1[j] + tol
        report.max_residual = max(report.max_residual, float(residual - (bound - tol)))
        if residual > bound:
            report.violations.append(KktViolation(j, float(fit.beta[j]), float(residual), float(bound)))
    return report
