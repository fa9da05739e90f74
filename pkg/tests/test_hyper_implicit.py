"""Implicit-path tests: H-matvec vs dense assembly, CG vs dense solves,
meta-gradient vs the dense oracle, Jacobian vs finite differences, the
frozen-variance reduction, and exact cost accounting."""

import numpy as np
import pytest

from bayesmeta import (CgConfig, InnerConfig, LinearGaussianModel,
                       MetaLossSpec, NegativeCurvatureError, PriorParams,
                       TangentVector, TaskData, VariationalParams, apply_g,
                       closed_form_linear_optimum, conjugate_gradient,
                       dense_snapshot, fd_jacobian_of_optimum, h_matvec,
                       imaml_prior, implicit_meta_gradient, nrmse,
                       oracle_dense_g, oracle_dense_h, oracle_meta_gradient,
                       run_inner_gd)


def small_task(p=3, n=6, seed=0, sigma=0.3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(p, n))
    theta = rng.normal(size=p)
    return TaskData(x_tr=x, y_tr=x.T @ theta + sigma * rng.normal(size=n),
                    x_val=rng.normal(size=(p, n)), y_val=rng.normal(size=n),
                    noise_sigma=sigma)


def random_prior(p, seed=0):
    rng = np.random.default_rng(seed)
    return PriorParams(rng.normal(size=p), rng.uniform(-1, 0.5, p))


class TestHMatvec:
    def test_probes_reconstruct_dense_h(self):
        p = 3
        data = small_task(p, seed=1)
        prior = random_prior(p, 1)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        dense = oracle_dense_h(prior, data, v)
        probed = np.column_stack([
            h_matvec(model, data, v, prior,
                     TangentVector.from_concat(np.eye(2 * p)[j])).concat()
            for j in range(2 * p)])
        assert np.linalg.norm(probed - dense) <= 1e-10 * np.linalg.norm(dense)

    def test_variance_block_at_optimum(self):
        # at the stationary point the variance diagonal equals d*^-2 / 2
        p = 3
        data = small_task(p, seed=2)
        prior = random_prior(p, 2)
        model = LinearGaussianModel(p)
        v_star = closed_form_linear_optimum(prior, data)
        for i in range(p):
            e = np.zeros(p)
            e[i] = 1.0
            out = h_matvec(model, data, v_star, prior,
                           TangentVector(np.zeros(p), e))
            assert out.wrt_var[i] == pytest.approx(0.5 / v_star.var[i] ** 2,
                                                   rel=1e-10)

    def test_zero_vector_counts_one_hvp(self):
        p = 3
        data = small_task(p, seed=3)
        model = LinearGaussianModel(p)
        before = model.hvp_calls
        out = h_matvec(model, data, closed_form_linear_optimum(
            random_prior(p, 3), data), random_prior(p, 3),
            TangentVector.zeros(p))
        assert np.allclose(out.concat(), 0.0)
        assert model.hvp_calls == before + 1

    def test_symmetry_as_bilinear_form(self):
        p = 4
        data = small_task(p, seed=4)
        prior = random_prior(p, 4)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        rng = np.random.default_rng(5)
        for _ in range(5):
            u = TangentVector.from_concat(rng.normal(size=2 * p))
            w = TangentVector.from_concat(rng.normal(size=2 * p))
            lhs = w.concat() @ h_matvec(model, data, v, prior, u).concat()
            rhs = u.concat() @ h_matvec(model, data, v, prior, w).concat()
            assert abs(lhs - rhs) <= 1e-6 * (1 + np.linalg.norm(u.concat())
                                             * np.linalg.norm(w.concat()))


class TestConjugateGradient:
    def test_identity_system(self):
        rhs = TangentVector.from_concat(np.array([1.0, -2.0, 3.0, 0.5]))
        x, iters, residual = conjugate_gradient(lambda t: t, rhs,
                                                CgConfig(max_iters=10))
        assert np.allclose(x.concat(), rhs.concat(), atol=1e-14)
        assert iters == 1
        assert residual <= 1e-14

    def test_spd_system_vs_dense(self):
        rng = np.random.default_rng(6)
        n = 6
        a = rng.normal(size=(n, n))
        spd = a @ a.T + n * np.eye(n)
        b = rng.normal(size=n)
        x, iters, _ = conjugate_gradient(
            lambda t: TangentVector.from_concat(spd @ t.concat()),
            TangentVector.from_concat(b),
            CgConfig(max_iters=2 * n, rel_tol=0.0))
        ref = np.linalg.solve(spd, b)
        assert np.linalg.norm(x.concat() - ref) <= 1e-8 * np.linalg.norm(ref)

    @pytest.mark.parametrize("p", [4, 8, 16])
    def test_spd_systems_up_to_p16(self, p):
        rng = np.random.default_rng(p)
        n = 2 * p
        a = rng.normal(size=(n, n))
        spd = a @ a.T + n * np.eye(n)
        b = rng.normal(size=n)
        x, _, _ = conjugate_gradient(
            lambda t: TangentVector.from_concat(spd @ t.concat()),
            TangentVector.from_concat(b),
            CgConfig(max_iters=n, rel_tol=0.0))
        ref = np.linalg.solve(spd, b)
        assert np.linalg.norm(x.concat() - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_budget_honored_and_error_decreases(self):
        rng = np.random.default_rng(7)
        n = 6
        a = rng.normal(size=(n, n))
        spd = a @ a.T + n * np.eye(n)
        b = rng.normal(size=n)
        ref = np.linalg.solve(spd, b)

        def solve(budget):
            x, iters, _ = conjugate_gradient(
                lambda t: TangentVector.from_concat(spd @ t.concat()),
                TangentVector.from_concat(b),
                CgConfig(max_iters=budget, rel_tol=0.0))
            err = x.concat() - ref
            return iters, float(err @ (spd @ err))  # energy-norm error

        iters1, e1 = solve(1)
        iters2, e2 = solve(2)
        assert iters1 == 1 and iters2 <= 2
        assert e2 < e1

    def test_zero_rhs(self):
        x, iters, residual = conjugate_gradient(lambda t: t,
                                                TangentVector.zeros(3),
                                                CgConfig(max_iters=5))
        assert np.allclose(x.concat(), 0.0)
        assert iters == 0 and residual == 0.0

    def test_negative_curvature_abort(self):
        neg = -np.eye(4)
        with pytest.raises(NegativeCurvatureError):
            conjugate_gradient(
                lambda t: TangentVector.from_concat(neg @ t.concat()),
                TangentVector.from_concat(np.ones(4)),
                CgConfig(max_iters=3))
        # with the abort disabled, CG stops quietly instead
        x, iters, _ = conjugate_gradient(
            lambda t: TangentVector.from_concat(neg @ t.concat()),
            TangentVector.from_concat(np.ones(4)),
            CgConfig(max_iters=3, abort_on_negative_curvature=False))
        assert iters == 0

    def test_rel_tol_early_stop(self):
        rhs = TangentVector.from_concat(np.ones(4))
        _, iters, residual = conjugate_gradient(lambda t: t, rhs,
                                                CgConfig(max_iters=10,
                                                         rel_tol=1e-6))
        assert iters == 1 and residual <= 1e-6


class TestApplyG:
    def test_zero_input(self):
        out = apply_g(random_prior(3), np.zeros(3), TangentVector.zeros(3))
        assert np.allclose(out.concat(), 0.0)

    def test_unit_prior_variance_case(self):
        p = 3
        prior = PriorParams(np.zeros(p), np.zeros(p))
        rng = np.random.default_rng(8)
        u = TangentVector(rng.normal(size=p), rng.normal(size=p))
        out = apply_g(prior, np.zeros(p), u)
        assert np.allclose(out.wrt_mean, u.wrt_mean)
        assert np.allclose(out.wrt_var, u.wrt_var / 2)

    def test_matches_dense_g(self):
        p = 4
        data = small_task(p, seed=9)
        prior = random_prior(p, 9)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        g_dense = oracle_dense_g(prior, data, v)
        g_mean_tr = model.nll_grad(v, data, "train").wrt_mean
        rng = np.random.default_rng(10)
        u = TangentVector.from_concat(rng.normal(size=2 * p))
        want = g_dense @ u.concat()
        got = apply_g(prior, g_mean_tr, u).concat()
        assert np.linalg.norm(got - want) <= 1e-12 * (1 + np.linalg.norm(want))


class TestImplicitMetaGradient:
    def test_matches_dense_oracle_at_optimum(self):
        p = 8
        data = small_task(p, n=16, seed=11)
        prior = random_prior(p, 11)
        model = LinearGaussianModel(p)
        spec = MetaLossSpec()
        v_star = closed_form_linear_optimum(prior, data)
        est = implicit_meta_gradient(model, data, v_star, prior, spec,
                                     CgConfig(max_iters=4 * p, rel_tol=0.0))
        truth = oracle_meta_gradient(prior, data, spec)
        assert nrmse(est, truth) <= 1e-8

    @pytest.mark.parametrize("p", [2, 4, 8])
    def test_jacobian_matches_fd(self, p):
        # keystone: column-by-column solves reproduce the FD Jacobian of the
        # prior-to-optimum map
        data = small_task(p, n=3 * p, seed=12 + p)
        prior = random_prior(p, 12 + p)
        snap = dense_snapshot(prior, data)
        fd = fd_jacobian_of_optimum(prior, data)
        err = np.linalg.norm(snap.jacobian_dense - fd) / np.linalg.norm(fd)
        assert err <= 1e-4

    def test_grad2_zero_for_nll_only_loss(self):
        from bayesmeta import meta_loss_grads
        p = 4
        data = small_task(p, seed=13)
        prior = random_prior(p, 13)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        _, _, grad2 = meta_loss_grads(model, data, v, prior, MetaLossSpec())
        assert np.array_equal(grad2.concat(), np.zeros(2 * p))

    def test_cost_invariant_in_inner_steps(self):
        p = 4
        data = small_task(p, seed=14)
        prior = random_prior(p, 14)
        model = LinearGaussianModel(p)
        spec = MetaLossSpec()
        cg = CgConfig(max_iters=3, rel_tol=0.0)
        calls = {}
        for k in (1, 100):
            v, _ = run_inner_gd(model, data, prior, InnerConfig(steps=k, lr=0.01))
            g = implicit_meta_gradient(model, data, v, prior, spec, cg)
            assert g.hvp_calls == g.cg_iters
            calls[k] = g.hvp_calls
        assert calls[1] == calls[100]

    def test_hvp_calls_bounded_by_budget(self):
        p = 4
        data = small_task(p, seed=15)
        prior = random_prior(p, 15)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        for budget in (1, 2, 5):
            g = implicit_meta_gradient(model, data, v, prior, MetaLossSpec(),
                                       CgConfig(max_iters=budget, rel_tol=0.0))
            assert g.hvp_calls <= budget

    def test_log_coordinate_consistency(self):
        p = 4
        data = small_task(p, seed=16)
        prior = random_prior(p, 16)
        model = LinearGaussianModel(p)
        v = closed_form_linear_optimum(prior, data)
        g = implicit_meta_gradient(model, data, v, prior, MetaLossSpec(),
                                   CgConfig(max_iters=2 * p, rel_tol=0.0))
        assert np.array_equal(g.wrt_log_var, prior.var * g.wrt_var)


class TestFrozenVarianceReduction:
    def test_mean_block_jacobian_matches_dense_inverse(self):
        p = 4
        lam = 2.5
        data = small_task(p, n=8, seed=17)
        rng = np.random.default_rng(17)
        prior = imaml_prior(p, rng.normal(size=p), lam)
        model = LinearGaussianModel(p)
        v_fix = VariationalParams.from_prior(prior)
        g_tr = model.nll_grad(v_fix, data, "train")
        jac = np.zeros((p, p))
        for j in range(p):
            rhs = TangentVector(np.eye(p)[j], np.zeros(p))

            def mv(t):
                out = h_matvec(model, data, v_fix, prior,
                               TangentVector(t.wrt_mean, np.zeros(p)),
                               grad_var_tr=g_tr.wrt_var)
                return TangentVector(out.wrt_mean, t.wrt_var)

            u, _, _ = conjugate_gradient(mv, rhs,
                                         CgConfig(max_iters=4 * p, rel_tol=0.0))
            jac[:, j] = u.wrt_mean / prior.var
        hess_m = data.x_tr @ data.x_tr.T / data.noise_sigma ** 2
        dense = np.linalg.inv(hess_m / lam + np.eye(p))
        assert np.linalg.norm(jac - dense) <= 1e-10 * np.linalg.norm(dense)

    def test_masked_gradient_has_zero_variance_block(self):
        p = 4
        data = small_task(p, seed=18)
        prior = imaml_prior(p, np.zeros(p), 2.0)
        model = LinearGaussianModel(p)
        v, _ = run_inner_gd(model, data, prior, InnerConfig(steps=50, lr=0.01),
                            freeze_log_var=True)
        g = implicit_meta_gradient(model, data, v, prior, MetaLossSpec(),
                                   CgConfig(max_iters=5), mask_variance=True)
        assert np.array_equal(g.wrt_var, np.zeros(p))
        assert np.array_equal(g.wrt_log_var, np.zeros(p))
