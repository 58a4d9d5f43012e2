import math

import numpy as np
import pytest

from qlsub.errors import EmptySample, SingularHessian
from qlsub.estimator import (
    WeightedObservation,
    full_data_variance,
    sandwich_variance,
    solve_weighted_qle,
    stack_observations,
    subsample_hessian,
    vc_contribution,
    weighted_score,
)
from qlsub.families import EXP, IDENTITY
from qlsub.sampling import optimal_probabilities, score_mv, waterfill
from qlsub.synth import generate_case, make_spec

from _oracles import weighted_least_squares


def _random_instance(rng, n=60, d=4):
    x = np.column_stack([np.ones(n), rng.uniform(-1, 1, (n, d - 1))])
    beta = rng.normal(0, 0.5, d)
    y = x @ beta + rng.normal(0, 0.3, n)
    p = rng.uniform(0.2, 1.0, n)
    return x, y, p


class TestSolver:
    def test_identity_matches_wls_closed_form(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            x, y, p = _random_instance(rng)
            fit = solve_weighted_qle(x, y, IDENTITY, p=p, tol=1e-12)
            oracle = weighted_least_squares(x, y, 1.0 / p)
            np.testing.assert_allclose(fit.beta, oracle, atol=1e-10)

    def test_intercept_only_exp_is_log_mean(self):
        x = np.ones((2, 1))
        y = np.array([2.0, 4.0])
        fit = solve_weighted_qle(x, y, EXP)
        assert fit.beta[0] == pytest.approx(math.log(3.0), abs=1e-10)

    def test_full_inclusion_equals_unweighted_fit(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, (200, 3))
        y = rng.poisson(np.exp(x @ np.array([0.4, 0.2, 0.1]))).astype(float)
        a = solve_weighted_qle(x, y, EXP, p=np.ones(200))
        b = solve_weighted_qle(x, y, EXP)
        np.testing.assert_array_equal(a.beta, b.beta)

    def test_score_norm_below_stopping_rule(self):
        rng = np.random.default_rng(3)
        x, y, p = _random_instance(rng)
        tol = 1e-9
        fit = solve_weighted_qle(x, y, IDENTITY, p=p, tol=tol)
        score = weighted_score(x, y, IDENTITY, fit.beta, p=p)
        assert np.max(np.abs(score)) <= tol * (1.0 + np.sum(1.0 / p))

    def test_weight_invariance_under_constant_rescale(self):
        # halving every inclusion probability scales the score by 2 but
        # leaves the root unchanged
        rng = np.random.default_rng(4)
        x = rng.uniform(0, 1, (300, 3))
        y = rng.poisson(np.exp(x @ np.array([0.4, 0.2, 0.1]))).astype(float)
        p = rng.uniform(0.5, 1.0, 300)
        a = solve_weighted_qle(x, y, EXP, p=p, tol=1e-12)
        b = solve_weighted_qle(x, y, EXP, p=0.5 * p, tol=1e-12)
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-8)

    def test_newton_converges_quickly_from_zero(self):
        spec = make_spec("c1", 10_000, seed=9)
        x, y, _ = generate_case(spec)
        fit = solve_weighted_qle(x, y, EXP)
        assert fit.converged
        assert fit.iterations <= 25

    def test_empty_sample_rejected(self):
        with pytest.raises(EmptySample):
            solve_weighted_qle(np.empty((0, 2)), np.empty(0), EXP)

    def test_singular_design_raises_with_condition(self):
        x = np.ones((30, 2))  # identical columns
        y = np.arange(30.0)
        with pytest.raises(SingularHessian) as err:
            solve_weighted_qle(x, y, IDENTITY)
        assert err.value.condition > 1e12

    def test_ridge_rescues_singular_design(self):
        x = np.ones((30, 2))
        y = np.arange(30.0)
        fit = solve_weighted_qle(x, y, IDENTITY, ridge=1e-6)
        assert fit.converged

    def test_newton_matrix_matches_score_jacobian(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, (40, 3))
        y = rng.poisson(np.exp(0.3 * x.sum(axis=1))).astype(float)
        p = rng.uniform(0.3, 1.0, 40)
        beta = np.array([0.1, -0.2, 0.3])
        newton = subsample_hessian(x, EXP, beta, p=p, scale=1)
        h = 1e-6
        jac = np.empty((3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            jac[:, j] = (
                weighted_score(x, y, EXP, beta + e, p=p)
                - weighted_score(x, y, EXP, beta - e, p=p)
            ) / (2 * h)
        np.testing.assert_allclose(newton, -jac, rtol=1e-5)


class TestScore:
    def test_single_observation_arithmetic(self):
        score = weighted_score(
            np.array([[2.0]]), np.array([5.0]), IDENTITY, np.array([1.0]), p=np.array([0.5])
        )
        assert score[0] == pytest.approx(12.0, abs=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            weighted_score(np.ones((3, 2)), np.ones(3), IDENTITY, np.ones(3))


class TestHessian:
    def test_orthonormal_rows_give_identity(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        h = subsample_hessian(x, IDENTITY, np.zeros(2), p=np.full(2, 0.5), scale=2)
        np.testing.assert_array_equal(h, np.eye(2))

    def test_exp_at_zero_equals_identity_family(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(20, 3))
        p = rng.uniform(0.2, 1, 20)
        a = subsample_hessian(x, EXP, np.zeros(3), p=p, scale=5)
        b = subsample_hessian(x, IDENTITY, np.zeros(3), p=p, scale=5)
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_full_data_form_is_average_curvature(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0, 1, (50, 3))
        beta = np.array([0.2, 0.1, -0.3])
        h = subsample_hessian(x, EXP, beta, scale=50)
        w = EXP.mean_derivative(x @ beta)
        np.testing.assert_allclose(h, (x * w[:, None]).T @ x / 50, rtol=1e-14)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(30, 4))
        p = rng.uniform(0.1, 1, 30)
        h = subsample_hessian(x, EXP, rng.normal(size=4) * 0.1, p=p, scale=30)
        assert np.array_equal(h, h.T)
        eigs = np.linalg.eigvalsh(h)
        assert eigs.min() >= -1e-10 * np.trace(h)


class TestSandwich:
    def test_full_inclusion_gives_zero(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(25, 3))
        y = rng.normal(size=25)
        v = sandwich_variance(
            [(x, y, np.ones(25), np.zeros(3))], IDENTITY, np.eye(3), 25
        )
        np.testing.assert_array_equal(v, np.zeros((3, 3)))

    def test_single_observation_arithmetic(self):
        # residual 2, p = 0.5: meat = 4 * 0.5 / 0.25 = 8 with unit bread
        x = np.array([[1.0]])
        y = np.array([2.0])
        v = sandwich_variance(
            [(x, y, np.array([0.5]), np.array([0.0]))], IDENTITY, np.eye(1), 1
        )
        assert v[0, 0] == pytest.approx(8.0, abs=0)

    def test_symmetric_psd(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(40, 3))
        y = rng.normal(size=40)
        p = rng.uniform(0.05, 0.9, 40)
        bread = subsample_hessian(x, IDENTITY, np.zeros(3), p=p, scale=40)
        v = sandwich_variance([(x, y, p, np.zeros(3))], IDENTITY, bread, 40)
        assert np.array_equal(v, v.T)
        assert np.linalg.eigvalsh(v).min() >= -1e-12 * np.trace(v)

    def test_singular_bread_raises(self):
        with pytest.raises(SingularHessian):
            sandwich_variance(
                [(np.ones((2, 2)), np.ones(2), np.full(2, 0.5), np.zeros(2))],
                IDENTITY,
                np.zeros((2, 2)),
                2,
            )

    def test_vc_contribution_zero_when_certain(self):
        x = np.random.default_rng(0).normal(size=(10, 2))
        vc = vc_contribution(x, np.ones(10), IDENTITY, np.zeros(2), np.ones(10))
        np.testing.assert_array_equal(vc, np.zeros((2, 2)))


class TestFullDataVariance:
    def test_certain_inclusion_is_exactly_zero(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(0, 1, (30, 3))
        y = rng.poisson(np.exp(x.sum(axis=1) * 0.3)).astype(float)
        beta = solve_weighted_qle(x, y, EXP).beta
        v = full_data_variance(x, y, EXP, beta, np.ones(30))
        np.testing.assert_array_equal(v, np.zeros((3, 3)))

    def test_two_point_hand_computation(self):
        # identity family, beta = 0: V_c = sum resid^2 x x' (1/p - 1)/N^2,
        # bread = mean xx'
        x = np.array([[1.0], [2.0]])
        y = np.array([1.0, -1.0])
        p = np.array([0.5, 0.25])
        bread = (1.0 * 1.0 + 2.0 * 2.0) / 2.0
        meat = (1.0 * 1.0 * (2.0 - 1.0) + 1.0 * 4.0 * (4.0 - 1.0)) / 4.0
        expected = meat / bread**2
        v = full_data_variance(x, y, IDENTITY, np.array([0.0]), p)
        assert v[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_optimal_probabilities_minimize_trace(self):
        # the capped-proportional allocation beats uniform on tr(V)
        rng = np.random.default_rng(12)
        for _ in range(10):
            n, r = 40, 8.0
            x = rng.uniform(0.1, 1, (n, 2))
            y = rng.poisson(np.exp(x @ np.array([0.5, 0.5]))).astype(float)
            beta = solve_weighted_qle(x, y, EXP).beta
            sigma_inv = np.linalg.inv(subsample_hessian(x, EXP, beta, scale=n))
            scores = score_mv(x, y, EXP, beta, sigma_inv)
            if np.count_nonzero(scores > 0) <= r:
                continue
            cap, _ = waterfill(scores, r)
            p_opt = optimal_probabilities(scores, r, cap)
            p_opt = np.clip(p_opt, 1e-12, 1.0)
            tr_opt = np.trace(full_data_variance(x, y, EXP, beta, p_opt))
            tr_unif = np.trace(full_data_variance(x, y, EXP, beta, np.full(n, r / n)))
            assert tr_opt <= tr_unif * (1 + 1e-9)


def test_weighted_observation_validation_and_stacking():
    with pytest.raises(ValueError):
        WeightedObservation(x=np.array([1.0]), y=0.0, p=0.0)
    obs = [
        WeightedObservation(x=np.array([1.0, 2.0]), y=3.0, p=0.5),
        WeightedObservation(x=np.array([4.0, 5.0]), y=6.0, p=1.0),
    ]
    x, y, p = stack_observations(obs)
    assert x.shape == (2, 2)
    np.testing.assert_array_equal(y, [3.0, 6.0])
    np.testing.assert_array_equal(p, [0.5, 1.0])
