"""Self-contained invariant suite behind the ``verify`` CLI command.

Each check produces a named record with the measured value and its
tolerance; the command prints one line per check and exits nonzero if any
fails. No network, no external data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List

import numpy as np

from .hyper_implicit import CgConfig, conjugate_gradient, h_matvec
from .hyper_unrolled import fd_meta_gradient, unrolled_meta_gradient
from .inner_opt import (InnerConfig, closed_form_linear_optimum,
                        inner_objective_grad, inner_objective_value,
                        run_inner_gd)
from .linear_oracle import (dense_snapshot, fd_jacobian_of_optimum, nrmse,
                            oracle_dense_h, oracle_meta_gradient)
from .meta_loss import MetaLossSpec
from .meta_driver import TaskGenSpec, generate_linear_tasks, imaml_prior
from .models import LinearGaussianModel
from .vi_core import (PriorParams, TangentVector, VariationalParams,
                      derive_seed, kl_diag_gaussian, kl_grad, raw_to_log_grad,
                      standard_normal)


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.note})" if self.note else ""
        return (f"{status}  {self.name}: measured={self.measured:.3e} "
                f"tolerance={self.tolerance:.3e}{extra}")


def _task(p=8, seed=0, **kw):
    defaults = dict(dim=p, n_tr=2 * p, n_val=2 * p, n_tasks=1, seed=seed,
                    noise_sigma=0.05, cond_kappa=10.0, design_scale=0.2)
    defaults.update(kw)
    tasks, _ = generate_linear_tasks(TaskGenSpec(**defaults))
    return tasks[0]


def _prior(p, seed=0, var=0.8):
    mean = 0.5 * standard_normal(p, derive_seed(seed, 1234))
    return PriorParams(mean, np.log(np.full(p, var)))


def run_all_checks() -> List[CheckResult]:
    results: List[CheckResult] = []

    def record(name, measured, tolerance, note="", upper=True):
        ok = measured <= tolerance if upper else measured >= tolerance
        results.append(CheckResult(name, float(measured), float(tolerance),
                                   bool(ok), note))

    rng = np.random.default_rng(7)

    # KL nonnegativity and zero at equality
    worst = 0.0
    for p in (1, 2, 8, 32):
        prior = _prior(p, seed=p)
        q = VariationalParams(prior.mean + rng.normal(size=p),
                              prior.log_var + rng.normal(size=p))
        worst = min(worst, kl_diag_gaussian(q, prior))
        same = kl_diag_gaussian(VariationalParams.from_prior(prior), prior)
        record(f"kl_zero_at_equality_p{p}", abs(same), 1e-12)
    record("kl_nonnegative", -worst, 1e-12)

    # KL gradients vs central finite differences
    for p in (1, 2, 8, 32):
        prior = _prior(p, seed=10 + p)
        q = VariationalParams(prior.mean + 0.5 * rng.normal(size=p),
                              prior.log_var + 0.3 * rng.normal(size=p))
        g_q, g_pr = kl_grad(q, prior)
        err = _fd_check_kl(q, prior, g_q, g_pr)
        record(f"kl_grad_vs_fd_p{p}", err, 1e-6)

    # log-coordinate chain rule on a quadratic
    p = 5
    d = rng.uniform(0.2, 2.0, p)
    a = rng.normal(size=p)
    grad_d = 2 * a * d + a  # gradient of f(d) = sum a d^2 + a d
    lhs = raw_to_log_grad(grad_d, d)
    ell = np.log(d)
    fd = np.zeros(p)
    for i in range(p):
        h = 1e-7
        e = np.zeros(p)
        e[i] = h
        f_plus = np.sum(a * np.exp(ell + e) ** 2 + a * np.exp(ell + e))
        f_minus = np.sum(a * np.exp(ell - e) ** 2 + a * np.exp(ell - e))
        fd[i] = (f_plus - f_minus) / (2 * h)
    record("log_chain_rule_vs_fd", np.linalg.norm(lhs - fd) / np.linalg.norm(fd),
           1e-6)

    # linear-model gradient and HVP vs finite differences
    p = 6
    data = _task(p=p, seed=3)
    model = LinearGaussianModel(p)
    prior = _prior(p, seed=3)
    v = VariationalParams(prior.mean + 0.2 * rng.normal(size=p),
                          prior.log_var + 0.2 * rng.normal(size=p))
    g = model.nll_grad(v, data, "train")
    err = _fd_check_nll(model, data, v, g)
    record("linear_grad_vs_fd", err, 1e-6)
    herr = _dense_hvp_check(model, data, v, prior)
    record("linear_hvp_vs_dense_fd", herr, 1e-6)

    # CG exact solve vs dense for SPD systems
    for p_cg in (6, 16):
        a = rng.normal(size=(2 * p_cg, 2 * p_cg))
        spd = a @ a.T + 2 * p_cg * np.eye(2 * p_cg)
        b = rng.normal(size=2 * p_cg)
        sol, iters, _ = conjugate_gradient(
            lambda t: TangentVector.from_concat(spd @ t.concat()),
            TangentVector.from_concat(b),
            CgConfig(max_iters=2 * 2 * p_cg, rel_tol=0.0))
        ref = np.linalg.solve(spd, b)
        record(f"cg_vs_dense_solve_p{p_cg}",
               np.linalg.norm(sol.concat() - ref) / np.linalg.norm(ref), 1e-8)

    # inner GD: stationarity of the closed-form optimum, contraction, descent
    p = 8
    data = _task(p=p, seed=5)
    model = LinearGaussianModel(p)
    prior = _prior(p, seed=5)
    v_star = closed_form_linear_optimum(prior, data)
    g_raw = inner_objective_grad(model, data, v_star, prior, 1.0, None, 0)
    g_log = np.concatenate([g_raw.wrt_mean,
                            raw_to_log_grad(g_raw.wrt_var, v_star.var)])
    scale = 1.0 + np.linalg.norm(np.concatenate([v_star.mean, v_star.log_var]))
    record("stationarity_at_closed_form", np.linalg.norm(g_log) / scale, 1e-8)
    record("posterior_variance_contraction",
           float(np.max(v_star.var - prior.var)), 1e-15)

    # demonstration: the alternative 1/(2 sigma^2) variance factor is NOT the
    # stationary point of the descended objective (its residual must be large)
    v_printed = closed_form_linear_optimum(prior, data,
                                           printed_variance_factor=True)
    g_alt = inner_objective_grad(model, data, v_printed, prior, 1.0, None, 0)
    g_alt_log = np.concatenate([g_alt.wrt_mean,
                                raw_to_log_grad(g_alt.wrt_var, v_printed.var)])
    record("variance_factor_discrepancy_demo",
           np.linalg.norm(g_alt_log) / scale, 1e-8, upper=False,
           note="alternative 1/(2 sigma^2) variance scaling fails stationarity,"
                " as expected")

    cfg = InnerConfig(steps=300, lr=0.01)
    vals = []
    v_run = VariationalParams.from_prior(prior)
    from dataclasses import replace
    for k in (0, 50, 100, 300):
        v_k, _ = run_inner_gd(model, data, prior, replace(cfg, steps=k), seed=1)
        vals.append(inner_objective_value(model, data, v_k, prior, 1.0, None, 0))
    record("inner_objective_descent", float(max(np.diff(vals))), 1e-12,
           note="step-size problem if this fails, not a gradient bug")

    # Lemma-1 implicit Jacobian vs FD Jacobian of the closed-form optimum
    for p_l in (2, 4, 8):
        data_l = _task(p=p_l, seed=20 + p_l)
        prior_l = _prior(p_l, seed=20 + p_l)
        snap = dense_snapshot(prior_l, data_l)
        fd_jac = fd_jacobian_of_optimum(prior_l, data_l)
        record(f"lemma1_jacobian_vs_fd_p{p_l}",
               np.linalg.norm(snap.jacobian_dense - fd_jac)
               / np.linalg.norm(fd_jac), 1e-4)

    # h_matvec probing reproduces the dense H
    p = 3
    data = _task(p=p, seed=9)
    prior = _prior(p, seed=9)
    model = LinearGaussianModel(p)
    v = closed_form_linear_optimum(prior, data)
    dense_h = oracle_dense_h(prior, data, v)
    probed = np.zeros_like(dense_h)
    for j in range(2 * p):
        e = np.zeros(2 * p)
        e[j] = 1.0
        probed[:, j] = h_matvec(model, data, v, prior,
                                TangentVector.from_concat(e)).concat()
    record("h_matvec_vs_dense", np.linalg.norm(probed - dense_h)
           / np.linalg.norm(dense_h), 1e-10)

    # unrolled vs FD-through-the-unroll, and exact cost counters
    p = 4
    data = _task(p=p, seed=11)
    prior = _prior(p, seed=11)
    model = LinearGaussianModel(p)
    spec = MetaLossSpec()
    icfg = InnerConfig(steps=5, lr=0.01, record_trace=True)
    _, trace = run_inner_gd(model, data, prior, icfg, seed=2)
    before = model.hvp_calls
    ug = fd = None
    ug = unrolled_meta_gradient(model, data, trace, prior, spec, seed=2)
    record("unrolled_hvp_count_equals_k",
           abs(model.hvp_calls - before - icfg.steps), 0.0)
    fd = fd_meta_gradient(model, data, prior, icfg, spec, seed=2)
    record("unrolled_vs_fd_through_unroll",
           np.linalg.norm(ug.concat_log() - fd.concat_log())
           / np.linalg.norm(fd.concat_log()), 1e-5)

    # implicit path: dense-oracle agreement and cost invariance in K
    truth = oracle_meta_gradient(prior, data, spec)
    from .hyper_implicit import implicit_meta_gradient
    v_star = closed_form_linear_optimum(prior, data)
    est = implicit_meta_gradient(model, data, v_star, prior, spec,
                                 CgConfig(max_iters=4 * p, rel_tol=0.0))
    record("implicit_vs_dense_oracle", nrmse(est, truth), 1e-8)
    calls = []
    for k in (1, 100):
        v_k, _ = run_inner_gd(model, data, prior,
                              InnerConfig(steps=k, lr=0.01), seed=2)
        g_k = implicit_meta_gradient(model, data, v_k, prior, spec,
                                     CgConfig(max_iters=3, rel_tol=0.0))
        calls.append(g_k.hvp_calls)
        record(f"implicit_hvp_equals_cg_iters_k{k}",
               abs(g_k.hvp_calls - g_k.cg_iters), 0.0)
    record("implicit_cost_invariant_in_k", abs(calls[0] - calls[1]), 0.0)

    # iMAML reduction: mean-block Jacobian equals (H/lambda + I)^-1
    p = 4
    data = _task(p=p, seed=13)
    lam = 2.5
    prior_i = imaml_prior(p, 0.3 * np.ones(p), lam)
    model = LinearGaussianModel(p)
    v_fix = VariationalParams.from_prior(prior_i)
    g_tr = model.nll_grad(v_fix, data, "train")
    jac = np.zeros((p, p))
    for j in range(p):
        e = np.zeros(p)
        rhs = TangentVector(np.eye(p)[j], np.zeros(p))

        def mv(t):
            out = h_matvec(model, data, v_fix, prior_i,
                           TangentVector(t.wrt_mean, np.zeros(p)),
                           grad_var_tr=g_tr.wrt_var)
            return TangentVector(out.wrt_mean, t.wrt_var)

        u, _, _ = conjugate_gradient(mv, rhs, CgConfig(max_iters=4 * p,
                                                       rel_tol=0.0))
        jac[:, j] = u.wrt_mean / prior_i.var
    hess_m = data.x_tr @ data.x_tr.T / data.noise_sigma ** 2
    dense = np.linalg.inv(hess_m / lam + np.eye(p))
    record("imaml_reduction_vs_dense",
           np.linalg.norm(jac - dense) / np.linalg.norm(dense), 1e-10)

    return results


def _fd_check_kl(q, prior, g_q, g_pr, eps=1e-6):
    p = q.dim
    num = np.zeros(4 * p)
    ana = np.concatenate([g_q.wrt_mean, g_q.wrt_var,
                          g_pr.wrt_mean, g_pr.wrt_var])

    def f(qm, qd, pm, pd):
        return kl_diag_gaussian(VariationalParams.from_var(qm, qd),
                                PriorParams.from_var(pm, pd))

    blocks = [(q.mean, 0), (q.var, 1), (prior.mean, 2), (prior.var, 3)]
    for bi, (vec, which) in enumerate(blocks):
        for i in range(p):
            h = eps * (1 + abs(vec[i]))
            args_p = [q.mean.copy(), q.var.copy(), prior.mean.copy(),
                      prior.var.copy()]
            args_m = [a.copy() for a in args_p]
            args_p[which][i] += h
            args_m[which][i] -= h
            num[bi * p + i] = (f(*args_p) - f(*args_m)) / (2 * h)
    return np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)


def _fd_check_nll(model, data, v, g, eps=1e-7):
    p = v.dim
    num = np.zeros(2 * p)

    def f(m, d):
        return model.expected_nll(VariationalParams.from_var(m, d), data,
                                  "train")

    for i in range(p):
        h = eps * (1 + abs(v.mean[i]))
        e = np.zeros(p)
        e[i] = h
        num[i] = (f(v.mean + e, v.var) - f(v.mean - e, v.var)) / (2 * h)
        h = eps * v.var[i]
        e = np.zeros(p)
        e[i] = h
        num[p + i] = (f(v.mean, v.var + e) - f(v.mean, v.var - e)) / (2 * h)
    ana = g.concat()
    return np.linalg.norm(ana - num) / np.linalg.norm(num)


def _dense_hvp_check(model, data, v, prior, eps=1e-3):
    # quadratic objective: a larger step adds no bias but kills cancellation
    """Dense second-order FD Hessian of the expected nll vs HVP probes."""
    p = v.dim
    probed = np.zeros((2 * p, 2 * p))
    for j in range(2 * p):
        e = np.zeros(2 * p)
        e[j] = 1.0
        probed[:, j] = model.nll_hvp(v, data, "train",
                                     TangentVector.from_concat(e)).concat()

    def f(vec):
        return model.expected_nll(
            VariationalParams.from_var(vec[:p], np.maximum(vec[p:], 1e-12)),
            data, "train")

    x0 = np.concatenate([v.mean, v.var])
    dense = np.zeros((2 * p, 2 * p))
    for i in range(2 * p):
        for j in range(2 * p):
            hi = eps * (1 + abs(x0[i]))
            hj = eps * (1 + abs(x0[j]))
            ei = np.zeros(2 * p)
            ej = np.zeros(2 * p)
            ei[i] = hi
            ej[j] = hj
            dense[i, j] = (f(x0 + ei + ej) - f(x0 + ei - ej)
                           - f(x0 - ei + ej) + f(x0 - ei - ej)) / (4 * hi * hj)
    denom = max(np.linalg.norm(dense), 1.0)
    return np.linalg.norm(probed - dense) / denom
