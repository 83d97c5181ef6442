"""Tests for the block-penalized proximal gradient solver."""

import numpy as np
import pytest
from scipy.optimize import brentq

from clr_data import MatchedDataset, Stratum, gradient, information_matrix, neg_log_likelihood
from clr_errors import InvalidArgumentError
from clr_solver import (
    PenaltySpec,
    SolverOptions,
    Standardization,
    _top_curvature,
    fit_penalized,
    kkt_check,
    lambda_max,
    penalty_value,
    soft_threshold,
)
from tests.conftest import make_matched


def pair_differences(data: MatchedDataset) -> np.ndarray:
    """x_control - x_case per 1:1 stratum."""
    X = data.covariates
    return np.array([X[s.control_rows[0]] - X[s.case_row] for s in data.strata])


def grid_oracle(data: MatchedDataset, spec: PenaltySpec, radius: float = 4.0) -> float:
    """Minimum of the penalized objective over a coarse grid refined once around its best point."""
    D = pair_differences(data)
    p = data.p
    l1, l2 = spec.column_weights(data.block_sizes)

    def objective(points):
        # points: (p, G)
        nll = np.logaddexp(0.0, D @ points).sum(axis=0)
        pen = (l1[:, None] * np.abs(points)).sum(axis=0) + 0.5 * (l2[:, None] * points ** 2).sum(axis=0)
        return nll + pen

    def search(center, half_width, step):
        axes = [np.arange(c - half_width, c + half_width + step / 2, step) for c in center]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.vstack([m.ravel() for m in mesh])
        values = objective(points)
        best = int(np.argmin(values))
        return points[:, best], float(values[best])

    coarse, _ = search(np.zeros(p), radius, 5e-2)
    _, value = search(coarse, 1e-1, 1e-3)
    return value


class TestPenaltySpec:

    def test_weights_split_by_alpha(self):
        spec = PenaltySpec([2.0, 4.0], alpha=0.25)
        l1, l2 = spec.column_weights((1, 2))
        np.testing.assert_allclose(l1, [0.5, 1.0, 1.0])
        np.testing.assert_allclose(l2, [1.5, 3.0, 3.0])

    def test_from_factors(self):
        spec = PenaltySpec.from_factors(3.0, [1.0, 2.5])
        np.testing.assert_allclose(spec.lambdas, [3.0, 7.5])

    @pytest.mark.parametrize("lambdas, alpha", [([-1.0, 1.0], 1.0), ([1.0], 0.0),
                                                ([np.inf], 1.0), ([1.0], 1.5), ([], 1.0)])
    def test_invalid_values_rejected(self, lambdas, alpha):
        with pytest.raises(InvalidArgumentError):
            PenaltySpec(lambdas, alpha)

    def test_block_count_mismatch(self, small_data):
        with pytest.raises(InvalidArgumentError, match="2 block"):
            fit_penalized(small_data, PenaltySpec([1.0, 1.0, 1.0]))

    def test_unpenalized_mask_zeroes_weights(self):
        spec = PenaltySpec([5.0], alpha=0.5, unpenalized_mask=[True, False])
        l1, l2 = spec.column_weights((2,))
        np.testing.assert_allclose(l1, [0.0, 2.5])
        np.testing.assert_allclose(l2, [0.0, 2.5])

    def test_penalty_value(self):
        spec = PenaltySpec([2.0, 1.0], alpha=0.5)
        beta = np.array([1.0, -2.0, 3.0])
        # block 1: 2 * (0.5*3 + 0.25*5); block 2: 1 * (0.5*3 + 0.25*9)
        assert penalty_value(beta, spec, (2, 1)) == pytest.approx(2 * (1.5 + 1.25) + (1.5 + 2.25))
        assert penalty_value(beta, spec, (2, 1), scale=np.array([1.0, 1.0, 2.0])) == pytest.approx(
            2 * (1.5 + 1.25) + (3.0 + 9.0))

    def test_soft_threshold(self):
        np.testing.assert_allclose(soft_threshold(np.array([3.0, -0.5, -2.0]), np.array([1.0, 1.0, 0.5])),
                                   [2.0, 0.0, -1.5])


class TestOracle:

    def test_matches_grid_oracle_on_small_instances(self, tight_options):
        rng = np.random.default_rng(77)
        options = SolverOptions(max_iterations=tight_options.max_iterations,
                                rel_tolerance=tight_options.rel_tolerance,
                                coef_tolerance=tight_options.coef_tolerance,
                                standardize=False)
        for trial in range(25):
            p = int(rng.integers(1, 3))
            blocks = (1, 1) if p == 2 else (1,)
            data = make_matched(20, p, k=1, seed=100 + trial, blocks=blocks,
                                beta=rng.normal(0, 1, p))
            spec = PenaltySpec(rng.uniform(0.5, 4.0, len(blocks)), alpha=float(rng.choice([1.0, 0.5])))
            fit = fit_penalized(data, spec, options)
            assert fit.converged
            assert fit.objective <= grid_oracle(data, spec) + 1e-4
            assert kkt_check(fit, data, spec, tol=1e-4).ok

    def test_unpenalized_matches_bisection_root(self, tight_options):
        data = make_matched(50, 1, k=1, seed=8, beta=np.array([0.8]))
        options = SolverOptions(max_iterations=tight_options.max_iterations,
                                rel_tolerance=tight_options.rel_tolerance,
                                coef_tolerance=tight_options.coef_tolerance,
                                standardize=False)
        fit = fit_penalized(data, PenaltySpec([0.0]), options)
        root = brentq(lambda b: gradient(np.array([b]), data)[0], -20.0, 20.0, xtol=1e-12)
        assert fit.beta[0] == pytest.approx(root, abs=1e-5)

    def test_objective_is_loss_plus_penalty(self, signal_data):
        spec = PenaltySpec([2.0, 4.0], alpha=0.7)
        fit = fit_penalized(signal_data, spec)
        expected = neg_log_likelihood(fit.beta, signal_data) + penalty_value(
            fit.beta, spec, signal_data.block_sizes, scale=fit.standardization.scale)
        assert fit.objective == pytest.approx(expected, rel=1e-12)


class TestSparsity:

    @pytest.mark.parametrize("alpha", [1.0, 0.6])
    @pytest.mark.parametrize("standardize", [True, False])
    def test_twice_lambda_max_gives_all_zero(self, alpha, standardize):
        for seed in range(5):
            data = make_matched(30, 6, k=2, seed=seed, blocks=(2, 4),
                                beta=np.array([1.0, 0.0, 0.5, 0.0, 0.0, -1.0]))
            lm = lambda_max(data, alpha, standardize)
            options = SolverOptions(standardize=standardize)
            fit = fit_penalized(data, PenaltySpec(2.0 * lm, alpha), options)
            for sl in data.block_slices:
                assert np.all(fit.beta[sl] == 0.0)
            assert fit.nonzero.size == 0

    def test_below_lambda_max_selects_something(self, signal_data):
        lm = lambda_max(signal_data)
        fit = fit_penalized(signal_data, PenaltySpec(0.5 * lm))
        assert fit.nonzero.size > 0

    def test_penalty_factors_divide_lambda_max(self, signal_data):
        base = lambda_max(signal_data)
        np.testing.assert_allclose(lambda_max(signal_data, penalty_factors=[1.0, 4.0]),
                                   base / np.array([1.0, 4.0]))
        np.testing.assert_allclose(lambda_max(signal_data, alpha=0.5), 2.0 * base)

    def test_lasso_zeros_are_exact(self, signal_data):
        fit = fit_penalized(signal_data, PenaltySpec([1.0, 1e3]))
        assert np.all(fit.beta[4:] == 0.0)
        np.testing.assert_array_equal(fit.nonzero, np.flatnonzero(fit.beta))


class TestSolverBehaviour:

    def test_objective_trace_is_non_increasing(self, signal_data):
        fit = fit_penalized(signal_data, PenaltySpec([1.0, 2.0], alpha=0.8))
        trace = np.array(fit.objective_trace)
        assert trace.size >= 2
        assert np.all(np.diff(trace) <= 1e-12 * np.abs(trace[:-1]))

    @pytest.mark.parametrize("accelerate", [True, False])
    def test_kkt_holds_after_convergence(self, signal_data, tight_options, accelerate):
        options = SolverOptions(max_iterations=tight_options.max_iterations,
                                rel_tolerance=tight_options.rel_tolerance,
                                coef_tolerance=tight_options.coef_tolerance,
                                accelerate=accelerate)
        spec = PenaltySpec([3.0, 6.0], alpha=0.9)
        fit = fit_penalized(signal_data, spec, options)
        assert fit.converged
        report = kkt_check(fit, signal_data, spec, tol=1e-4)
        assert report.ok, report.violations

    def test_kkt_flags_a_perturbed_zero(self, signal_data, tight_options):
        spec = PenaltySpec([2.0, 1e3])
        fit = fit_penalized(signal_data, spec, tight_options)
        assert kkt_check(fit, signal_data, spec).ok
        assert fit.beta[4] == 0.0
        fit.beta = fit.beta.copy()
        fit.beta[4] += 0.1
        report = kkt_check(fit, signal_data, spec)
        assert 4 in {v.index for v in report.violations}

    def test_initial_step_needs_no_dense_eigendecomposition(self, monkeypatch):
        def refuse(*args, **kwargs):
            raise AssertionError("dense eigendecomposition")

        monkeypatch.setattr(np.linalg, "eigvalsh", refuse)
        data = make_matched(20, 1500, k=1, seed=3)
        fit = fit_penalized(data, PenaltySpec([1e6]))
        assert fit.converged
        assert fit.nonzero.size == 0

    def test_curvature_estimate_does_not_exceed_top_eigenvalue(self):
        data = make_matched(40, 6, k=2, seed=6)
        top = float(np.linalg.eigvalsh(information_matrix(np.zeros(6), data))[-1])
        estimate = _top_curvature(data)
        assert 0.5 * top <= estimate <= top * (1 + 1e-9)

    def test_standardized_fit_is_scale_equivariant(self, signal_data, tight_options):
        scales = np.array([10.0, 0.1, 1.0, 3.0, 1.0, 1.0, 0.5, 2.0])
        rescaled = signal_data.with_covariates(signal_data.covariates * scales)
        spec = PenaltySpec([2.0, 5.0], alpha=0.5)
        a = fit_penalized(signal_data, spec, tight_options)
        b = fit_penalized(rescaled, spec, tight_options)
        np.testing.assert_allclose(b.beta * scales, a.beta, atol=1e-5)

    def test_unpenalized_scale_equivariance(self, tight_options):
        data = make_matched(80, 3, k=1, seed=21, beta=np.array([0.7, -0.4, 0.2]))
        options = SolverOptions(max_iterations=tight_options.max_iterations,
                                rel_tolerance=tight_options.rel_tolerance,
                                coef_tolerance=tight_options.coef_tolerance,
                                standardize=False)
        scales = np.array([4.0, 0.25, 1.0])
        a = fit_penalized(data, PenaltySpec([0.0]), options)
        b = fit_penalized(data.with_covariates(data.covariates * scales), PenaltySpec([0.0]), options)
        np.testing.assert_allclose(b.beta * scales, a.beta, rtol=1e-4, atol=1e-6)

    def test_constant_column_held_at_zero(self):
        data = make_matched(25, 3, k=1, seed=2, beta=np.array([1.0, 0.0, 0.0]))
        X = np.array(data.covariates)
        X[:, 2] = 5.0
        data = data.with_covariates(X)
        fit = fit_penalized(data, PenaltySpec([0.5]))
        assert fit.beta[2] == 0.0
        assert any("constant column" in w for w in fit.warnings)
        assert fit.standardization.to_dict()["constant_columns"] == [2]

    def test_unpenalized_column_survives_heavy_penalty(self, signal_data):
        mask = np.zeros(signal_data.p, dtype=bool)
        mask[0] = True
        fit = fit_penalized(signal_data, PenaltySpec([1e4, 1e4], unpenalized_mask=mask))
        assert fit.beta[0] != 0.0
        assert np.all(fit.beta[1:] == 0.0)

    def test_iteration_limit_reports_non_convergence(self, signal_data):
        fit = fit_penalized(signal_data, PenaltySpec([0.1, 0.1]), SolverOptions(max_iterations=1))
        assert not fit.converged
        assert fit.iterations == 1
        assert fit.warnings and "did not converge" in fit.warnings[-1]

    def test_identity_standardization(self):
        std = Standardization.identity(3)
        X = np.arange(6, dtype=float).reshape(2, 3)
        np.testing.assert_array_equal(std.transform(X), X)

    def test_separable_pairs_stay_bounded_under_penalty(self):
        X = np.array([[1.0], [0.0], [2.0], [0.5], [1.5], [-1.0]])
        strata = (Stratum("a", 0, (1,)), Stratum("b", 2, (3,)), Stratum("c", 4, (5,)))
        data = MatchedDataset(strata, X, (1,))
        fit = fit_penalized(data, PenaltySpec([0.5]))
        assert fit.converged
        assert np.isfinite(fit.beta[0]) and fit.beta[0] > 0
