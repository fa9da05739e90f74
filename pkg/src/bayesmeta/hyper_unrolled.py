"""Explicit meta-gradient: reverse-mode through the recorded inner GD trace.

The inner update runs in w = (mean, log-variance) coordinates, so the reverse
sweep propagates adjoints through exactly that map: one train expected-nll
HVP per step plus analytic KL second-derivative blocks and the analytic
theta-partials of the step. Also provides the finite-difference meta-gradient
of the composed map theta -> L_val(inner_gd(theta), theta), the ground truth
both paths are validated against.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from .inner_opt import InnerConfig, InnerTrace, run_inner_gd
from .meta_loss import MetaGradient, MetaLossSpec, meta_loss_grads, meta_loss_value
from .models import GradientOracle, TaskData
from .vi_core import PriorParams, TangentVector, VariationalParams

FD_EPS_DEFAULT = 1e-5


def _phi_grad_raw(oracle, data, v, prior, kl_weight, mc_budget, seed):
    from .inner_opt import inner_objective_grad
    return inner_objective_grad(oracle, data, v, prior, kl_weight, mc_budget, seed)


def unrolled_meta_gradient(oracle: GradientOracle, data: TaskData,
                           trace: InnerTrace, prior: PriorParams,
                           spec: MetaLossSpec, seed: int = 0) -> MetaGradient:
    """Backpropagate the validation meta-loss through the K recorded GD steps.

    Exactly K oracle HVPs are performed (one per step); KL curvature and the
    prior-partials of each step are analytic.
    """
    if trace is None or trace.iterates is None:
        raise ValueError("unrolled gradient needs a recorded trace")
    cfg = trace.cfg
    if len(trace.step_seeds) != trace.steps:
        raise ValueError("trace/config mismatch: seed list length")
    k_steps = trace.steps
    alpha = cfg.lr
    w_kl = cfg.kl_weight
    p = prior.dim
    d_prior = prior.var

    v_final = trace.iterates[-1]
    _, grad1, grad2 = meta_loss_grads(oracle, data, v_final, prior, spec, seed)

    # adjoint in (mean, log-var) coordinates at v^K
    a_m = grad1.wrt_mean.copy()
    a_l = v_final.var * grad1.wrt_var
    # meta-gradient accumulator in raw (m, d) coordinates
    g_m = grad2.wrt_mean.copy()
    g_d = grad2.wrt_var.copy()

    hvp_before = oracle.hvp_calls
    for k in range(k_steps - 1, -1, -1):
        v_k = trace.iterates[k]
        d_k = v_k.var
        step_seed = trace.step_seeds[k]
        if not np.all(np.isfinite(a_m)) or not np.all(np.isfinite(a_l)):
            raise FloatingPointError(f"non-finite adjoint at step {k}")

        # theta-partials of the step map (KL only; the nll has no theta term)
        if w_kl != 0.0:
            g_m += alpha * w_kl * a_m / d_prior
            g_d += alpha * w_kl * ((v_k.mean - prior.mean) / d_prior ** 2 * a_m
                                   + d_k / (2.0 * d_prior ** 2) * a_l)

        # Hessian of the inner objective in log coordinates applied to (a_m, a_l):
        # raw HVP at u = (a_m, d_k * a_l), then chain-rule corrections.
        u = TangentVector(a_m, d_k * a_l)
        hvp = oracle.nll_hvp(v_k, data, "train", u, cfg.mc_budget, step_seed)
        h_m = hvp.wrt_mean
        h_d = hvp.wrt_var
        if w_kl != 0.0:
            h_m = h_m + w_kl * a_m / d_prior
            h_d = h_d + w_kl * a_l / (2.0 * d_k)
        g_raw = _phi_grad_raw(oracle, data, v_k, prior, w_kl, cfg.mc_budget,
                              step_seed)
        h_l = d_k * h_d + d_k * g_raw.wrt_var * a_l

        a_m = a_m - alpha * h_m
        a_l = a_l - alpha * h_l

    assert oracle.hvp_calls - hvp_before == k_steps

    # boundary: v^0 = (m, log d) copied from the prior
    g_m += a_m
    g_d += a_l / d_prior
    return MetaGradient.from_raw(g_m, g_d, d_prior, hvp_calls=k_steps)


def fd_meta_gradient(oracle: GradientOracle, data: TaskData,
                     prior: PriorParams, inner_cfg: InnerConfig,
                     spec: MetaLossSpec, seed: int = 0,
                     fd_eps: float = FD_EPS_DEFAULT,
                     freeze_log_var: bool = False) -> MetaGradient:
    """Central finite differences of theta -> L_val(inner_gd(theta), theta).

    Perturbs all 2p coordinates of (m, log d) with common random numbers;
    costs 4p full inner runs. Ground-truth oracle for tests.
    """
    cfg = replace(inner_cfg, record_trace=False)
    p = prior.dim

    def composed(mean, log_var):
        pr = PriorParams(mean, log_var)
        v, _ = run_inner_gd(oracle, data, pr, cfg, seed,
                            freeze_log_var=freeze_log_var)
        return meta_loss_value(oracle, data, v, pr, spec, seed)

    g_m = np.zeros(p)
    g_l = np.zeros(p)
    for i in range(p):
        h = fd_eps * (1.0 + abs(prior.mean[i]))
        e = np.zeros(p)
        e[i] = h
        g_m[i] = (composed(prior.mean + e, prior.log_var)
                  - composed(prior.mean - e, prior.log_var)) / (2 * h)
    for i in range(p):
        h = fd_eps * (1.0 + abs(prior.log_var[i]))
        e = np.zeros(p)
        e[i] = h
        g_l[i] = (composed(prior.mean, prior.log_var + e)
                  - composed(prior.mean, prior.log_var - e)) / (2 * h)
    g_d = g_l / prior.var
    return MetaGradient(wrt_mean=g_m, wrt_var=g_d, wrt_log_var=g_l)
