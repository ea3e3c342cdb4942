import numpy as np
import pytest

from softcal import (
    InfeasibleStepError,
    LossSpec,
    MixedEffectsSpec,
    PopulationFrame,
    SingularGramError,
    SolverOptions,
    build_soft_targets,
    dual_gradient,
    dual_hessian,
    dual_objective,
    hard_targets,
    mask_unselected,
    sample_view,
    solve_newton,
)
from conftest import make_frame

ALL_SPECS = [
    LossSpec("square"),
    LossSpec("entropy_divergence"),
    LossSpec("empirical_likelihood"),
    LossSpec("maximum_entropy"),
    LossSpec("bounded_logistic", lower=0.0, upper=10.0),
    LossSpec("truncated_linear", lower=0.0, upper=6.0),
]
IDS = [s.family for s in ALL_SPECS]


def penalized_gram(frame, spec):
    x1s, x2s, _, qs = sample_view(frame)
    xs = np.hstack([x1s, x2s])
    gram = xs.T @ (xs * qs[:, None])
    if frame.q:
        gram[frame.p:, frame.p:] += spec.gamma * np.linalg.inv(spec.d_q_for(frame.q))
    return gram


class TestSoftTargets:
    def test_gamma_zero_adjustments_vanish(self, rng):
        frame = make_frame(rng, n_total=60, p=2, q=3)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.0))
        assert np.all(tg.m_s == 0) and np.all(tg.r_s == 0) and np.all(tg.t_r == 0)
        means = np.concatenate([frame.x1.mean(0), frame.x2.mean(0)])
        np.testing.assert_allclose(tg.t_x, means, rtol=1e-12)

    def test_block_inverse_identity(self, rng):
        frame = make_frame(rng, n_total=80, p=3, q=4, q_scale=rng.uniform(0.5, 2, 80))
        spec = MixedEffectsSpec(gamma=1.3)
        tg = build_soft_targets(frame, spec)
        panels = np.block([[tg.d11, tg.d12], [tg.d21, tg.d22]])
        prod = panels @ penalized_gram(frame, spec)
        np.testing.assert_allclose(prod, np.eye(frame.p + frame.q), atol=1e-8)

    def test_woodbury_form_of_square_solution(self, rng):
        # the square-loss weights reproduce the shrinkage form
        # w'X_S = 1'X_U [I - gamma A^{-1} blockdiag(0, D_q^{-1})]
        frame = make_frame(rng, n_total=20, p=2, q=3, select=0.8)
        spec = MixedEffectsSpec(gamma=1.0)
        tg = build_soft_targets(frame, spec)
        res = solve_newton(frame, LossSpec("square"), tg)
        assert res.converged
        x1s, x2s, _, _ = sample_view(frame)
        xs = np.hstack([x1s, x2s])
        lhs = res.weights @ xs
        a_inv = np.block([[tg.d11, tg.d12], [tg.d21, tg.d22]])
        j_mat = np.zeros_like(a_inv)
        j_mat[frame.p:, frame.p:] = np.linalg.inv(spec.d_q_for(frame.q))
        ones_tot = np.concatenate([frame.x1.sum(0), frame.x2.sum(0)])
        rhs = ones_tot @ (np.eye(frame.p + frame.q) - spec.gamma * a_inv @ j_mat)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8)

    def test_no_random_block(self, rng):
        frame = make_frame(rng, n_total=40, p=3, q=0)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=2.0))
        assert tg.m_s.shape == (3, 0) and tg.r_s.shape == (0, 0)
        np.testing.assert_allclose(tg.t_x, frame.x1.mean(0))

    def test_singular_gram_raises_with_rank_gap(self):
        x1 = np.column_stack([np.ones(10), np.arange(10.0)])
        x2 = x1[:, 1:].copy()  # duplicates an x1 column
        frame = PopulationFrame(x1=x1, x2=x2, delta=np.ones(10, bool))
        with pytest.raises(SingularGramError, match="rank gap 1"):
            build_soft_targets(frame, MixedEffectsSpec(gamma=0.0))
        tg = build_soft_targets(
            frame, MixedEffectsSpec(gamma=0.0), allow_singular=True
        )
        assert np.all(np.isfinite(tg.t_x))


class TestDualDerivatives:
    def test_objective_zero_at_origin(self, rng):
        frame = make_frame(rng, n_total=50, p=2, q=2)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.5))
        zero = np.zeros(4)
        assert dual_objective(zero, frame, LossSpec("ent"), tg) == pytest.approx(0.0)
        assert dual_objective(zero, frame, LossSpec("sq"), tg) == pytest.approx(0.0)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
    def test_finite_difference_gradient(self, spec, rng):
        frame = make_frame(rng, n_total=60, p=2, q=3, q_scale=rng.uniform(0.6, 1.5, 60))
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.8))
        c = 0.05 * rng.normal(size=5)
        grad = dual_gradient(c, frame, spec, tg)
        h = 1e-6
        fd = np.empty_like(c)
        for i in range(len(c)):
            e = np.zeros_like(c)
            e[i] = h
            fd[i] = (
                dual_objective(c + e, frame, spec, tg)
                - dual_objective(c - e, frame, spec, tg)
            ) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
    def test_finite_difference_hessian(self, spec, rng):
        frame = make_frame(rng, n_total=60, p=2, q=3)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.8))
        c = 0.05 * rng.normal(size=5)
        hess = dual_hessian(c, frame, spec, tg)
        h = 1e-5
        fd = np.empty_like(hess)
        for i in range(len(c)):
            e = np.zeros_like(c)
            e[i] = h
            fd[:, i] = (
                dual_gradient(c + e, frame, spec, tg)
                - dual_gradient(c - e, frame, spec, tg)
            ) / (2 * h)
        np.testing.assert_allclose(hess, fd, rtol=1e-5, atol=1e-8)

    def test_hessian_symmetric_psd(self, rng):
        frame = make_frame(rng, n_total=70, p=3, q=3)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.5))
        c = 0.1 * rng.normal(size=6)
        hess = dual_hessian(c, frame, LossSpec("me"), tg)
        np.testing.assert_allclose(hess, hess.T, atol=1e-12)
        assert np.linalg.eigvalsh(hess).min() >= -1e-10


class TestSolver:
    def test_square_loss_matches_closed_form(self, rng):
        # closed form: w = 1 + Sigma_q X_S A^{-1} (X_U'1 - X_S'1), q = 1
        frame = make_frame(rng, n_total=90, p=3, q=4)
        spec = MixedEffectsSpec(gamma=1.7)
        tg = build_soft_targets(frame, spec)
        res = solve_newton(frame, LossSpec("square"), tg)
        assert res.converged
        x1s, x2s, _, _ = sample_view(frame)
        xs = np.hstack([x1s, x2s])
        a_mat = penalized_gram(frame, spec)
        shortfall = np.concatenate(
            [frame.x1.sum(0) - x1s.sum(0), frame.x2.sum(0) - x2s.sum(0)]
        )
        w_closed = 1.0 + xs @ np.linalg.solve(a_mat, shortfall)
        np.testing.assert_allclose(res.weights, w_closed, atol=1e-8)

    def test_full_selection_hard_calibration_is_identity(self, rng):
        frame = make_frame(rng, n_total=40, p=2, q=2, select=2.0)
        tg = hard_targets(frame)
        for spec in (LossSpec("sq"), LossSpec("ent"), LossSpec("el")):
            res = solve_newton(frame, spec, tg)
            assert res.converged
            np.testing.assert_allclose(res.c_hat, 0.0, atol=1e-9)
            np.testing.assert_allclose(res.weights, 1.0, atol=1e-9)

    def test_full_selection_infeasible_for_maximum_entropy(self, rng):
        # weights are forced above 1, so matching the sample totals exactly
        # is unattainable; the solver reports the best iterate
        frame = make_frame(rng, n_total=40, p=2, q=0, select=2.0)
        res = solve_newton(frame, LossSpec("me"), hard_targets(frame))
        assert not res.converged

    def test_maximum_entropy_medium_problem(self, rng):
        frame = make_frame(rng, n_total=200, p=3, q=4, select=0.5)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=1.0))
        opts = SolverOptions()
        res = solve_newton(frame, LossSpec("me"), tg, opts)
        assert res.converged
        assert res.max_residual < opts.tol_constraint * frame.n_total
        assert np.all(res.weights > 1.0)

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
    def test_soft_constraints_attained(self, spec, rng):
        # the converged weights satisfy the exact fixed-block constraints
        # and the adjusted random-block constraints
        for _ in range(3):
            frame = make_frame(rng, n_total=120, p=3, q=3, select=0.55)
            tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.7))
            res = solve_newton(frame, spec, tg)
            assert res.converged
            x1s, x2s, _, _ = sample_view(frame)
            lhs_fixed = res.weights @ x1s
            np.testing.assert_allclose(
                lhs_fixed, frame.x1.sum(0), atol=1e-8 * frame.n_total
            )
            lhs_rand = res.weights @ x2s
            rhs_rand = (
                frame.x2.sum(0)
                + tg.m_s.T @ frame.x1.sum(0)
                + tg.r_s.T @ frame.x2.sum(0)
            )
            np.testing.assert_allclose(lhs_rand, rhs_rand, atol=1e-8 * frame.n_total)

    def test_gamma_continuity_to_hard_calibration(self, rng):
        frame = make_frame(rng, n_total=100, p=3, q=3)
        hard = solve_newton(frame, LossSpec("me"), hard_targets(frame))
        assert hard.converged
        for gamma in (1e-6, 1e-8):
            tg = build_soft_targets(frame, MixedEffectsSpec(gamma=gamma))
            soft = solve_newton(frame, LossSpec("me"), tg)
            assert soft.converged
            assert np.max(np.abs(soft.weights - hard.weights)) <= 1e-4

    def test_objective_trace_nonincreasing(self, rng):
        frame = make_frame(rng, n_total=150, p=3, q=4, select=0.5)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.3))
        res = solve_newton(frame, LossSpec("el"), tg)
        assert np.all(np.diff(res.objective_trace) <= 0)

    def test_determinism(self, rng):
        frame = make_frame(rng, n_total=100, p=3, q=3)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.5))
        a = solve_newton(frame, LossSpec("me"), tg)
        b = solve_newton(frame, LossSpec("me"), tg)
        assert np.array_equal(a.c_hat, b.c_hat)
        assert np.array_equal(a.weights, b.weights)
        assert a.iterations == b.iterations

    def test_bounded_infeasible_returns_best_iterate(self, rng):
        # selecting ~25% of units needs average weights ~4; capping the
        # band at 2 makes the constraint set unattainable
        frame = make_frame(rng, n_total=120, p=2, q=0, select=0.25)
        tg = hard_targets(frame)
        res = solve_newton(
            frame, LossSpec("bounded_logistic", lower=0.0, upper=2.0), tg
        )
        assert not res.converged
        assert np.all(res.weights < 2.0)
        assert res.max_residual > 0

    def test_ridge_policy_runs(self, rng):
        frame = make_frame(rng, n_total=80, p=3, q=2)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.5))
        res = solve_newton(
            frame, LossSpec("me"), tg, SolverOptions(hessian_policy="ridge")
        )
        assert res.converged

    def test_empirical_likelihood_stays_interior(self, rng):
        # a low selection rate pushes weights high; the halving keeps
        # every iterate inside q z < 1
        frame = make_frame(rng, n_total=200, p=2, q=2, select=0.3)
        tg = build_soft_targets(frame, MixedEffectsSpec(gamma=0.5))
        res = solve_newton(frame, LossSpec("el"), tg)
        assert res.converged
        assert np.all(res.weights > 0)
