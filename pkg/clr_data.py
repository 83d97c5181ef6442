"""
Matched case-control data and the conditional logistic likelihood
==================================================================
A matched set (stratum) holds one case and k >= 1 controls. Conditioning on
exactly one case per stratum removes the stratum intercepts, leaving a
softmax over the members of each stratum:

    L_s(beta) = exp(eta_case) / sum_{j in s} exp(eta_j),   eta = X beta

All evaluations below are log-sum-exp stabilized per stratum.
"""

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from clr_errors import DataValidationError, InvalidArgumentError

# Coefficient vectors are plain float arrays of length p (log odds ratios).
Coefficients = np.ndarray

# Marks a stratum built from labels that contained no case.
NO_CASE = -1


# ============================================================================
# 1. Data model
# ============================================================================

@dataclass(frozen=True)
class Stratum:
    """One matched set: a case row and its control rows."""

    id: str
    case_row: int
    control_rows: Tuple[int, ...]

    @property
    def rows(self) -> Tuple[int, ...]:
        return (self.case_row,) + tuple(self.control_rows)

    @property
    def size(self) -> int:
        return 1 + len(self.control_rows)


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise DataValidationError(
                f"dataset failed validation ({len(self.violations)} violation(s)): "
                + "; ".join(self.violations),
                self.violations,
            )


@dataclass(frozen=True)
class _Layout:
    """Rows regrouped stratum by stratum, case first."""

    grouped: np.ndarray      # covariate rows in grouped order
    starts: np.ndarray       # offset of each stratum in ``grouped``
    sizes: np.ndarray
    case_sum: np.ndarray     # sum of case covariate rows


@dataclass(frozen=True, eq=False)
class MatchedDataset:
    """Strata of one case + k controls over a block-partitioned covariate matrix.

    ``covariates`` rows are subjects, columns are the p variables in block
    order. ``block_sizes`` partitions the columns into contiguous blocks.
    The object is immutable: the matrix is stored read-only.
    """

    strata: Tuple[Stratum, ...]
    covariates: np.ndarray
    block_sizes: Tuple[int, ...]
    column_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        matrix = np.array(self.covariates, dtype=float, copy=True)
        matrix.setflags(write=False)
        object.__setattr__(self, "covariates", matrix)
        object.__setattr__(self, "strata", tuple(self.strata))
        object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
        if self.column_names is None and matrix.ndim == 2:
            names = tuple(f"x{j + 1}" for j in range(matrix.shape[1]))
            object.__setattr__(self, "column_names", names)
        elif self.column_names is not None:
            object.__setattr__(self, "column_names", tuple(self.column_names))

    # -- shape -------------------------------------------------------------

    @property
    def n(self) -> int:
        """Number of strata."""
        return len(self.strata)

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_blocks(self) -> int:
        return len(self.block_sizes)

    @property
    def block_slices(self) -> List[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.block_sizes)]).astype(int)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    @cached_property
    def block_of_column(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_blocks), self.block_sizes)

    @cached_property
    def _layout(self) -> _Layout:
        sizes = np.array([s.size for s in self.strata], dtype=int)
        order = np.fromiter(
            (row for s in self.strata for row in s.rows), dtype=int, count=int(sizes.sum())
        )
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
        grouped = self.covariates[order]
        return _Layout(grouped=grouped, starts=starts, sizes=sizes,
                       case_sum=grouped[starts].sum(axis=0))

    # -- constructors and views -------------------------------------------

    @classmethod
    def from_labels(
        cls,
        stratum_ids: Sequence,
        case: Sequence[int],
        covariates: np.ndarray,
        block_sizes: Sequence[int],
        column_names: Optional[Sequence[str]] = None,
    ) -> "MatchedDataset":
        """Build strata from per-row stratum ids and 0/1 case labels.

        An id with several cases yields one Stratum per case (same id), and an
        id without a case yields a Stratum whose case_row is ``NO_CASE``; both
        are reported by :func:`validate`.
        """
        members: Dict[str, List[int]] = defaultdict(list)
        for row, sid in enumerate(stratum_ids):
            members[str(sid)].append(row)
        labels = np.asarray(case)
        strata: List[Stratum] = []
        for sid, rows in members.items():
            cases = [r for r in rows if labels[r] == 1]
            controls = tuple(r for r in rows if labels[r] != 1)
            if not cases:
                strata.append(Stratum(sid, NO_CASE, controls))
            for c in cases:
                strata.append(Stratum(sid, c, controls))
        return cls(tuple(strata), covariates, tuple(block_sizes),
                   tuple(column_names) if column_names is not None else None)

    def subset(self, strata_index: Sequence[int]) -> "MatchedDataset":
        """Dataset restricted to the given strata, rows renumbered compactly."""
        chosen = [self.strata[i] for i in strata_index]
        rows = [r for s in chosen for r in s.rows]
        remap = {old: new for new, old in enumerate(rows)}
        strata = tuple(
            Stratum(s.id, remap[s.case_row], tuple(remap[r] for r in s.control_rows))
            for s in chosen
        )
        return MatchedDataset(strata, self.covariates[rows], self.block_sizes, self.column_names)

    def select_block(self, block: int) -> "MatchedDataset":
        """Dataset keeping only the columns of one block (a single-block dataset)."""
        cols = self.block_slices[block]
        return MatchedDataset(self.strata, self.covariates[:, cols],
                              (self.block_sizes[block],), self.column_names[cols])

    def with_covariates(self, covariates: np.ndarray) -> "MatchedDataset":
        return MatchedDataset(self.strata, covariates, self.block_sizes, self.column_names)


# ============================================================================
# 2. Validation
# ============================================================================

def validate(data: MatchedDataset) -> ValidationReport:
    """List every violation of the data model; an empty report means valid."""
    report = ValidationReport()
    X = data.covariates

    if X.ndim != 2:
        report.violations.append(f"covariates must be a 2-D matrix, got {X.ndim} dimension(s)")
        return report
    n_rows, p = X.shape

    if any(b <= 0 for b in data.block_sizes):
        report.violations.append(f"block sizes must be positive, got {data.block_sizes}")
    if sum(data.block_sizes) != p:
        report.violations.append(
            f"block sizes {data.block_sizes} sum to {sum(data.block_sizes)} "
            f"but the covariate matrix has {p} columns"
        )

    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        r, c = bad[0]
        report.violations.append(
            f"{len(bad)} non-finite covariate value(s), first at row {r}, column {c}"
        )

    if not data.strata:
        report.violations.append("dataset has no strata")
        return report

    by_id: Dict[str, List[Stratum]] = defaultdict(list)
    for s in data.strata:
        by_id[s.id].append(s)

    owner: Dict[int, str] = {}
    for sid, entries in by_id.items():
        n_cases = sum(1 for s in entries if s.case_row != NO_CASE)
        if n_cases != 1:
            report.violations.append(f"stratum {sid!r} has {n_cases} cases (expected exactly 1)")
        for s in entries:
            if not s.control_rows:
                report.violations.append(f"stratum {sid!r} has no controls")
            if s.case_row in s.control_rows:
                report.violations.append(f"stratum {sid!r} lists its case row among the controls")
            elif len(set(s.control_rows)) != len(s.control_rows):
                report.violations.append(f"stratum {sid!r} repeats a control row")
            for row in s.rows:
                if row == NO_CASE:
                    continue
                if not 0 <= row < n_rows:
                    report.violations.append(f"stratum {sid!r} references missing row {row}")
                    continue
                previous = owner.setdefault(row, sid)
                if previous != sid:
                    report.violations.append(
                        f"row {row} belongs to strata {previous!r} and {sid!r}"
                    )

    unassigned = n_rows - len(owner)
    if unassigned > 0:
        report.violations.append(f"{unassigned} row(s) belong to no stratum")
    return report


# ============================================================================
# 3. Likelihood, score and information
# ============================================================================

def _check_beta(beta: Coefficients, data: MatchedDataset) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or beta.shape[0] != data.p:
        raise InvalidArgumentError(
            f"coefficient vector has shape {beta.shape}, expected ({data.p},)"
        )
    return beta


def _softmax_terms(beta: np.ndarray, data: MatchedDataset):
    """Per-stratum log-sum-exp and member probabilities in grouped order."""
    layout = data._layout
    eta = layout.grouped @ beta
    peak = np.maximum.reduceat(eta, layout.starts)
    shifted = np.exp(eta - np.repeat(peak, layout.sizes))
    denom = np.add.reduceat(shifted, layout.starts)
    log_norm = peak + np.log(denom)
    prob = shifted / np.repeat(denom, layout.sizes)
    return eta, log_norm, prob


def stratum_neg_log_likelihoods(beta: Coefficients, data: MatchedDataset) -> np.ndarray:
    """-log L_s for every stratum, in stratum order."""
    beta = _check_beta(beta, data)
    eta, log_norm, _ = _softmax_terms(beta, data)
    return log_norm - eta[data._layout.starts]


def neg_log_likelihood(beta: Coefficients, data: MatchedDataset) -> float:
    """Negative conditional log-likelihood summed over strata (no averaging)."""
    terms = stratum_neg_log_likelihoods(beta, data)
    # Each term is >= 0 mathematically; clip rounding noise at the boundary.
    return float(np.maximum(terms, 0.0).sum())


def gradient(beta: Coefficients, data: MatchedDataset) -> np.ndarray:
    """Gradient of :func:`neg_log_likelihood`: sum_s (sum_j pi_sj x_j - x_case)."""
    beta = _check_beta(beta, data)
    _, _, prob = _softmax_terms(beta, data)
    layout = data._layout
    return prob @ layout.grouped - layout.case_sum


def information_matrix(beta: Coefficients, data: MatchedDataset) -> np.ndarray:
    """Hessian of the negative log-likelihood (sum of within-stratum covariances)."""
    beta = _check_beta(beta, data)
    _, _, prob = _softmax_terms(beta, data)
    layout = data._layout
    mean = np.add.reduceat(prob[:, None] * layout.grouped, layout.starts, axis=0)
    centered = layout.grouped - np.repeat(mean, layout.sizes, axis=0)
    return (centered * prob[:, None]).T @ centered


def information_product(beta: Coefficients, data: MatchedDataset, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product H(beta) @ v without forming the p x p matrix."""
    beta = _check_beta(beta, data)
    _, _, prob = _softmax_terms(beta, data)
    layout = data._layout
    u = layout.grouped @ np.asarray(v, dtype=float)
    u_mean = np.add.reduceat(prob * u, layout.starts)
    # Weights sum to zero within a stratum, so the stratum means drop out.
    return layout.grouped.T @ (prob * (u - np.repeat(u_mean, layout.sizes)))


def null_neg_log_likelihood(data: MatchedDataset) -> float:
    """Value at beta = 0: sum_s log m_s."""
    return float(sum(math.log(s.size) for s in data.strata))
