"""
Simulation study: power and FDR of the selection pipeline
=========================================================
Each replicate runs the same steps, wired as a LangGraph StateGraph:

    generate -> adapt_pf -> find_lambda -> stability -> evaluate -> END

Replicates are independent and own a derived seed (master seed + replicate
index), so the report does not depend on how many workers run them.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, TypedDict

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from langgraph.graph import END, StateGraph
from scipy.special import softmax

from clr_data import MatchedDataset, Stratum
from clr_errors import ClrError, InvalidArgumentError, NumericalError
from clr_solver import SolverOptions
from clr_stability import (
    StabilityConfig,
    StabilityResult,
    penalty_vectors,
    select,
    stable_clr_g,
)
from clr_tuning import (
    CvPlan,
    LambdaSearch,
    PenaltyFactorReport,
    default_lambda_grid,
    average_default_pf,
    find_default_lambda,
    make_cv_plan,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.55 + 0.05 * i, 2) for i in range(8))


# ============================================================================
# 1. Settings and data generation
# ============================================================================

@dataclass(frozen=True)
class SimulationSetting:
    p1: int
    p2: int
    a1: int
    a2: int
    b1: float
    b2: float
    n_pairs: int = 200
    controls_per_case: int = 1
    covariate_sd: float = 1.0
    rho: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        problems = []
        if self.p1 < 1 or self.p2 < 1:
            problems.append("block sizes must be >= 1")
        if not (0 <= self.a1 <= self.p1 and 0 <= self.a2 <= self.p2):
            problems.append("active counts must lie in [0, block size]")
        if self.n_pairs < 4:
            problems.append("n_pairs must be >= 4")
        if self.controls_per_case < 1:
            problems.append("controls_per_case must be >= 1")
        if self.covariate_sd <= 0:
            problems.append("covariate_sd must be positive")
        if not (0.0 <= self.rho < 1.0):
            problems.append("rho must lie in [0, 1)")
        if problems:
            raise InvalidArgumentError("invalid simulation setting: " + "; ".join(problems))

    @property
    def p(self) -> int:
        return self.p1 + self.p2


TABLE1_SETTINGS: Dict[int, SimulationSetting] = {
    1: SimulationSetting(50, 50, 10, 10, 4.0, 4.0, name="1"),
    2: SimulationSetting(50, 50, 3, 17, 4.0, 4.0, name="2"),
    3: SimulationSetting(50, 50, 20, 0, 4.0, 0.0, name="3"),
    4: SimulationSetting(20, 80, 10, 10, 4.0, 1.0, name="4"),
    5: SimulationSetting(20, 80, 15, 5, 4.0, 4.0, name="5"),
    6: SimulationSetting(20, 80, 5, 15, 4.0, 4.0, name="6"),
}


@dataclass(eq=False)
class SimulatedData:
    data: MatchedDataset
    truth: np.ndarray
    beta: np.ndarray


def generate_dataset(setting: SimulationSetting) -> SimulatedData:
    """Draw one matched dataset; the case within each stratum follows the softmax of eta."""
    rng = np.random.default_rng(setting.seed)
    m = setting.controls_per_case + 1
    n_rows = setting.n_pairs * m

    beta = np.zeros(setting.p)
    active1 = np.sort(rng.choice(setting.p1, setting.a1, replace=False))
    active2 = setting.p1 + np.sort(rng.choice(setting.p2, setting.a2, replace=False))
    beta[active1] = setting.b1
    beta[active2] = setting.b2

    X = rng.standard_normal((n_rows, setting.p))
    if setting.rho > 0:
        shared = rng.standard_normal((n_rows, 1))
        X = np.sqrt(setting.rho) * shared + np.sqrt(1.0 - setting.rho) * X
    X *= setting.covariate_sd

    prob = softmax((X @ beta).reshape(setting.n_pairs, m), axis=1)
    u = rng.random(setting.n_pairs)
    picked = np.minimum((u[:, None] > np.cumsum(prob, axis=1)).sum(axis=1), m - 1)

    strata = []
    for s in range(setting.n_pairs):
        rows = range(s * m, (s + 1) * m)
        case = s * m + int(picked[s])
        strata.append(Stratum(f"s{s + 1:04d}", case, tuple(r for r in rows if r != case)))
    data = MatchedDataset(tuple(strata), X, (setting.p1, setting.p2))
    return SimulatedData(data, np.flatnonzero(beta), beta)


def evaluate_selection(selected: Sequence[int], truth: Sequence[int], p: int) -> Tuple[float, float]:
    """(power, fdr); power is 0 for an empty truth and fdr is 0 for an empty selection."""
    selected = {int(j) for j in selected}
    truth = {int(j) for j in truth}
    if any(not 0 <= j < p for j in selected | truth):
        raise InvalidArgumentError(f"variable indices must lie in [0, {p})")
    power = len(selected & truth) / len(truth) if truth else 0.0
    fdr = len(selected - truth) / len(selected) if selected else 0.0
    return power, fdr


# ============================================================================
# 2. Replicate pipeline (LangGraph)
# ============================================================================

@dataclass(frozen=True)
class PipelineConfig:
    alpha: float = 1.0
    B: int = 50
    n_folds: int = 5
    type_step1: str = "combined"
    pf_cap: float = 100.0
    pf_repeats: int = 3
    se_fraction: float = 1.0
    lambda_multipliers: Tuple[float, ...] = (1.0,)
    selection_threshold: float = 0.55
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    options: SolverOptions = SolverOptions()

    def __post_init__(self):
        if self.pf_repeats < 1:
            raise InvalidArgumentError(f"pf_repeats must be >= 1, got {self.pf_repeats}")
        if self.se_fraction < 0:
            raise InvalidArgumentError(f"se_fraction must be >= 0, got {self.se_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


class ReplicateState(TypedDict, total=False):
    setting: SimulationSetting
    pipeline: PipelineConfig
    replicate: int
    simulated: SimulatedData
    plan: CvPlan
    penalty_factors: PenaltyFactorReport
    lambda_search: LambdaSearch
    stability: StabilityResult
    evaluations: List[Dict]


def run_generate(state: ReplicateState) -> ReplicateState:
    simulated = generate_dataset(state["setting"])
    plan = make_cv_plan(simulated.data, state["pipeline"].n_folds, state["setting"].seed)
    return {"simulated": simulated, "plan": plan}


def run_adapt_pf(state: ReplicateState) -> ReplicateState:
    cfg = state["pipeline"]
    seeds = [state["setting"].seed + k for k in range(cfg.pf_repeats)]
    report = average_default_pf(state["simulated"].data, cfg.alpha, cfg.type_step1, cfg.n_folds,
                                seeds, cfg.pf_cap, cfg.options, skip_failed=True)
    return {"penalty_factors": report}


def run_find_lambda(state: ReplicateState) -> ReplicateState:
    cfg = state["pipeline"]
    data = state["simulated"].data
    pf = state["penalty_factors"].factors
    grid = default_lambda_grid(data, pf, cfg.alpha, standardize=cfg.options.standardize)
    search = find_default_lambda(data, pf, cfg.alpha, grid, state["plan"], cfg.options,
                                 skip_failed=True, se_fraction=cfg.se_fraction)
    return {"lambda_search": search}


def run_stability(state: ReplicateState) -> ReplicateState:
    cfg = state["pipeline"]
    lambda_list = penalty_vectors(state["lambda_search"].lambda1,
                                  state["penalty_factors"].factors.pf, cfg.lambda_multipliers)
    config = StabilityConfig(lambda_list, cfg.alpha, cfg.B, state["setting"].seed,
                             workers=1, options=cfg.options)
    return {"stability": stable_clr_g(state["simulated"].data, config)}


def run_evaluate(state: ReplicateState) -> ReplicateState:
    simulated = state["simulated"]
    p1 = state["setting"].p1
    rows = []
    for threshold in state["pipeline"].thresholds:
        chosen = select(state["stability"], threshold)
        power, fdr = evaluate_selection(chosen, simulated.truth, simulated.data.p)
        rows.append({
            "threshold": float(threshold),
            "n_selected": int(chosen.size),
            "n_selected_block1": int(np.sum(chosen < p1)),
            "power": power,
            "fdr": fdr,
            "selected": " ".join(str(int(j)) for j in chosen),
        })
    return {"evaluations": rows}


@lru_cache(maxsize=1)
def build_replicate_graph():
    """Compile the replicate pipeline: generate -> ... -> evaluate -> END."""
    workflow = StateGraph(ReplicateState)
    workflow.add_node("generate", run_generate)
    workflow.add_node("adapt_pf", run_adapt_pf)
    workflow.add_node("find_lambda", run_find_lambda)
    workflow.add_node("stability", run_stability)
    workflow.add_node("evaluate", run_evaluate)

    workflow.set_entry_point("generate")
    workflow.add_edge("generate", "adapt_pf")
    workflow.add_edge("adapt_pf", "find_lambda")
    workflow.add_edge("find_lambda", "stability")
    workflow.add_edge("stability", "evaluate")
    workflow.add_edge("evaluate", END)
    return workflow.compile()


# ============================================================================
# 3. Study
# ============================================================================

@dataclass(eq=False)
class StudyReport:
    records: pd.DataFrame
    table1: pd.DataFrame
    sweep: pd.DataFrame
    failures: List[Dict] = field(default_factory=list)
    n_fits: int = 0


def run_replicate(label: str, setting: SimulationSetting, pipeline: PipelineConfig,
                  replicate: int, seed: int) -> Dict:
    """Run one replicate in isolation; failures are returned, not raised."""
    state: ReplicateState = {
        "setting": replace(setting, seed=seed),
        "pipeline": pipeline,
        "replicate": replicate,
    }
    try:
        final = build_replicate_graph().invoke(state)
    except ClrError as exc:
        logger.warning("setting %s replicate %d failed: %s", label, replicate, exc)
        return {"setting": label, "replicate": replicate, "seed": seed,
                "error": f"{exc.category}: {exc}"}
    return {
        "setting": label,
        "replicate": replicate,
        "seed": seed,
        "lambda1": final["lambda_search"].lambda1,
        "lambda_min": final["lambda_search"].lambda_min,
        "penalty_factors": final["penalty_factors"].factors.pf.tolist(),
        "n_fits": final["stability"].n_fits,
        "evaluations": final["evaluations"],
    }


def run_study(settings: Dict[str, SimulationSetting], replicates: int,
              thresholds: Optional[Sequence[float]] = None,
              pipeline: PipelineConfig = PipelineConfig(), master_seed: int = 0,
              workers: int = 1) -> StudyReport:
    """Power/FDR per setting at ``pipeline.selection_threshold`` plus the threshold sweep."""
    if replicates < 1:
        raise InvalidArgumentError("replicates must be >= 1")
    if thresholds is not None:
        pipeline = replace(pipeline, thresholds=tuple(float(t) for t in thresholds))
    grid = sorted(set(pipeline.thresholds) | {pipeline.selection_threshold})
    if any(not 0.0 < t < 1.0 for t in grid):
        raise InvalidArgumentError("thresholds must lie in (0, 1)")
    pipeline = replace(pipeline, thresholds=tuple(grid))

    jobs = [(label, setting, r) for label, setting in settings.items() for r in range(replicates)]
    outcomes = Parallel(n_jobs=workers)(
        delayed(run_replicate)(label, setting, pipeline, r, master_seed + r)
        for label, setting, r in jobs
    )

    rows, failures, n_fits = [], [], 0
    for outcome in outcomes:
        if "error" in outcome:
            failures.append(outcome)
            continue
        n_fits += outcome["n_fits"]
        for ev in outcome["evaluations"]:
            rows.append({"setting": outcome["setting"], "replicate": outcome["replicate"],
                         "seed": outcome["seed"], "lambda1": outcome["lambda1"],
                         "lambda_min": outcome["lambda_min"], **ev})
    if not rows:
        raise NumericalError(f"all {len(jobs)} replicate(s) failed")
    for label in settings:
        if not any(r["setting"] == label for r in rows):
            logger.warning("setting %s: every replicate failed", label)

    records = pd.DataFrame(rows)
    sweep = (records.groupby(["setting", "threshold"], sort=False)[["power", "fdr"]]
             .mean().reset_index())
    at_threshold = records[np.isclose(records["threshold"], pipeline.selection_threshold)]
    table1 = (at_threshold.groupby("setting", sort=False)
              .agg(power=("power", "mean"), fdr=("fdr", "mean"), replicates=("replicate", "count"))
              .reset_index())
    return StudyReport(records, table1, sweep, failures, n_fits)
