"""Tests for data generation, evaluation and the replicate pipeline."""

from dataclasses import replace

import numpy as np
import pytest

import clr_simulation
from clr_data import validate
from clr_errors import InvalidArgumentError, NumericalError
from clr_simulation import (
    DEFAULT_THRESHOLDS,
    TABLE1_SETTINGS,
    PipelineConfig,
    SimulationSetting,
    build_replicate_graph,
    evaluate_selection,
    generate_dataset,
    run_adapt_pf,
    run_generate,
    run_replicate,
    run_study,
)
from tests.conftest import RUN_SLOW

TINY = SimulationSetting(5, 5, 2, 0, 2.0, 0.0, n_pairs=30, name="tiny")
TINY_PIPELINE = PipelineConfig(B=3, n_folds=3, thresholds=(0.6, 0.8))


class TestGenerateDataset:

    def test_first_setting_shape(self):
        simulated = generate_dataset(TABLE1_SETTINGS[1])
        data = simulated.data
        assert data.covariates.shape == (400, 100)
        assert data.n == 200
        assert data.block_sizes == (50, 50)
        assert simulated.truth.size == 20
        assert np.sum(simulated.truth < 50) == 10
        np.testing.assert_array_equal(simulated.beta[simulated.truth], 4.0)
        assert validate(data).is_valid

    def test_case_rate_is_one_per_stratum(self):
        data = generate_dataset(replace(TABLE1_SETTINGS[2], controls_per_case=2)).data
        assert data.covariates.shape[0] == 600
        assert all(s.size == 3 for s in data.strata)
        case_rows = {s.case_row for s in data.strata}
        assert len(case_rows) / data.covariates.shape[0] == pytest.approx(1 / 3)

    def test_seeded(self):
        a = generate_dataset(replace(TINY, seed=4))
        b = generate_dataset(replace(TINY, seed=4))
        c = generate_dataset(replace(TINY, seed=5))
        np.testing.assert_array_equal(a.data.covariates, b.data.covariates)
        assert [s.case_row for s in a.data.strata] == [s.case_row for s in b.data.strata]
        assert not np.array_equal(a.data.covariates, c.data.covariates)

    def test_inactive_second_block(self):
        simulated = generate_dataset(TABLE1_SETTINGS[3])
        assert np.all(simulated.truth < 50)
        assert np.all(simulated.beta[50:] == 0.0)

    def test_cases_follow_the_linear_predictor(self):
        simulated = generate_dataset(TABLE1_SETTINGS[3])
        X, beta = simulated.data.covariates, simulated.beta
        wins = sum(X[s.case_row] @ beta > X[s.control_rows[0]] @ beta for s in simulated.data.strata)
        assert wins / simulated.data.n > 0.8

    def test_no_effect_makes_either_member_the_case(self):
        simulated = generate_dataset(SimulationSetting(2, 2, 0, 0, 0.0, 0.0, n_pairs=10_000, seed=1))
        first = np.mean([s.case_row % 2 == 0 for s in simulated.data.strata])
        assert abs(first - 0.5) <= 0.02

    def test_huge_effect_picks_the_larger_member(self):
        simulated = generate_dataset(SimulationSetting(1, 1, 1, 0, 200.0, 0.0, n_pairs=1000, seed=2))
        X = simulated.data.covariates[:, 0]
        wins = np.mean([X[s.case_row] > X[s.control_rows[0]] for s in simulated.data.strata])
        assert wins >= 0.99

    def test_exchangeable_correlation(self):
        data = generate_dataset(SimulationSetting(3, 3, 1, 1, 1.0, 1.0, n_pairs=1000, rho=0.5)).data
        corr = np.corrcoef(data.covariates, rowvar=False)
        off = corr[~np.eye(6, dtype=bool)]
        assert abs(off.mean() - 0.5) < 0.05

    def test_covariate_scale(self):
        data = generate_dataset(replace(TINY, covariate_sd=3.0, n_pairs=500)).data
        assert data.covariates.std() == pytest.approx(3.0, rel=0.05)

    @pytest.mark.parametrize("kwargs", [{"a1": 6}, {"n_pairs": 2}, {"rho": 1.0},
                                        {"controls_per_case": 0}, {"covariate_sd": 0.0}])
    def test_invalid_setting(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            replace(TINY, **kwargs)

    def test_builtin_settings(self):
        assert sorted(TABLE1_SETTINGS) == [1, 2, 3, 4, 5, 6]
        s4 = TABLE1_SETTINGS[4]
        assert (s4.p1, s4.p2, s4.a1, s4.a2, s4.b1, s4.b2) == (20, 80, 10, 10, 4.0, 1.0)
        assert all(s.n_pairs == 200 for s in TABLE1_SETTINGS.values())


class TestEvaluateSelection:

    def test_power_and_fdr(self):
        assert evaluate_selection([0, 1, 5], [0, 1, 2, 3], p=10) == pytest.approx((0.5, 1 / 3))

    def test_empty_selection(self):
        assert evaluate_selection([], [2, 3], p=5) == (0.0, 0.0)

    def test_empty_truth(self):
        assert evaluate_selection([1], [], p=5) == (0.0, 1.0)

    def test_index_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            evaluate_selection([7], [1], p=5)


class TestReplicatePipeline:

    def test_graph_is_compiled_once(self):
        assert build_replicate_graph() is build_replicate_graph()

    def test_replicate_reports_every_threshold(self):
        outcome = run_replicate("tiny", TINY, TINY_PIPELINE, replicate=0, seed=11)
        assert "error" not in outcome
        assert [row["threshold"] for row in outcome["evaluations"]] == [0.6, 0.8]
        assert outcome["n_fits"] == 2 * TINY_PIPELINE.B
        assert outcome["lambda1"] > 0
        assert outcome["penalty_factors"][0] == 1.0
        for row in outcome["evaluations"]:
            assert 0.0 <= row["power"] <= 1.0 and 0.0 <= row["fdr"] <= 1.0

    def test_penalty_factors_averaged_over_cv_seeds(self):
        pipeline = replace(TINY_PIPELINE, pf_repeats=2)
        state = {"setting": replace(TINY, seed=5), "pipeline": pipeline}
        state.update(run_generate(state))
        report = run_adapt_pf(state)["penalty_factors"]
        assert len(report.tentative_fits) == 2
        assert report.factors.pf[0] == 1.0

    def test_lambda_rule_is_recorded(self):
        outcome = run_replicate("tiny", TINY, replace(TINY_PIPELINE, se_fraction=1.0), 0, seed=11)
        assert outcome["lambda1"] >= outcome["lambda_min"]

    @pytest.mark.parametrize("kwargs", [{"pf_repeats": 0}, {"se_fraction": -0.5}])
    def test_invalid_pipeline(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            PipelineConfig(**kwargs)

    def test_study_tables(self):
        report = run_study({"tiny": TINY}, replicates=2, thresholds=(0.6, 0.8),
                           pipeline=TINY_PIPELINE, master_seed=3)
        assert list(report.table1.columns) == ["setting", "power", "fdr", "replicates"]
        assert list(report.sweep.columns) == ["setting", "threshold", "power", "fdr"]
        assert report.table1["replicates"].tolist() == [2]
        assert sorted(report.sweep["threshold"]) == [0.55, 0.6, 0.8]
        assert sorted(report.records["seed"].unique()) == [3, 4]
        assert report.n_fits == 2 * 2 * TINY_PIPELINE.B
        assert not report.failures

    def test_study_independent_of_worker_count(self):
        kwargs = dict(replicates=2, pipeline=TINY_PIPELINE, master_seed=0)
        serial = run_study({"tiny": TINY}, workers=1, **kwargs)
        parallel = run_study({"tiny": TINY}, workers=2, **kwargs)
        assert serial.records.equals(parallel.records)

    def test_failed_replicate_is_isolated(self, monkeypatch):
        original = clr_simulation.generate_dataset

        def flaky(setting):
            if setting.seed == 1:
                raise NumericalError("synthetic failure")
            return original(setting)

        monkeypatch.setattr(clr_simulation, "generate_dataset", flaky)
        report = run_study({"tiny": TINY}, replicates=2, pipeline=TINY_PIPELINE)
        assert len(report.failures) == 1
        assert report.failures[0]["replicate"] == 1
        assert "synthetic failure" in report.failures[0]["error"]
        assert report.table1["replicates"].tolist() == [1]

    def test_all_replicates_failing_raises(self, monkeypatch):
        def broken(setting):
            raise NumericalError("synthetic failure")

        monkeypatch.setattr(clr_simulation, "generate_dataset", broken)
        with pytest.raises(NumericalError, match="all 2 replicate"):
            run_study({"tiny": TINY}, replicates=2, pipeline=TINY_PIPELINE)

    def test_invalid_thresholds(self):
        with pytest.raises(InvalidArgumentError):
            run_study({"tiny": TINY}, replicates=1, thresholds=(0.5, 1.2), pipeline=TINY_PIPELINE)


@pytest.mark.slow
@pytest.mark.skipif(not RUN_SLOW, reason="set BLOCKCLR_RUN_SLOW=1")
def test_desk_scale_study_reproduces_qualitative_pattern():
    settings = {str(k): v for k, v in TABLE1_SETTINGS.items()}
    report = run_study(settings, replicates=20, thresholds=DEFAULT_THRESHOLDS,
                       pipeline=PipelineConfig(B=50), master_seed=0, workers=-1)
    power = report.table1.set_index("setting")["power"]
    fdr = report.table1.set_index("setting")["fdr"]

    assert power["3"] == power.max()
    for low in ("1", "4", "6"):
        assert power[low] < power["3"] and power[low] < power["5"]
    assert fdr.between(0.05, 0.40).all()

    at_default = report.records[(report.records["setting"] == "4")
                                & np.isclose(report.records["threshold"], 0.55)]
    assert at_default["n_selected_block1"].sum() >= 0.8 * at_default["n_selected"].sum()

    for _, part in report.sweep.groupby("setting"):
        part = part.sort_values("threshold")
        assert np.all(np.diff(part["power"]) <= 0.02)
        assert np.all(np.diff(part["fdr"]) <= 0.02)
