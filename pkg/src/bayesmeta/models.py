"""Task models exposing expected-nll value / gradient / HVP at a variational point.

Two implementations of the same oracle interface:

* :class:`LinearGaussianModel` -- Bayesian linear regression where the
  expected nll under a diagonal Gaussian is available in closed form.
* :class:`MLPModel` -- a small tanh feedforward network; the expected nll is
  a Monte Carlo average over reparameterized parameter samples, gradients are
  manual reverse-mode, and the HVP is a central finite difference of the
  gradient with common random numbers.

Additive constants independent of the variational point are dropped from all
nll values (gradients and HVPs are unaffected).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .vi_core import TangentVector, VariationalParams, standard_normal

FD_EPSILON = 1e-4  # relative step for the FD-of-gradient HVP


@dataclass
class TaskData:
    """One task's train/validation splits. Inputs are columns of x_*."""

    x_tr: np.ndarray
    y_tr: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    noise_sigma: float = 1.0
    task_kind: str = "regression"

    def __post_init__(self):
        self.x_tr = np.atleast_2d(np.asarray(self.x_tr, dtype=np.float64))
        self.x_val = np.atleast_2d(np.asarray(self.x_val, dtype=np.float64))
        self.y_tr = np.asarray(self.y_tr)
        self.y_val = np.asarray(self.y_val)
        if self.x_tr.shape[1] != self.y_tr.shape[0]:
            raise ValueError("x_tr column count must match y_tr length")
        if self.x_val.shape[1] != self.y_val.shape[0]:
            raise ValueError("x_val column count must match y_val length")
        if self.y_val.shape[0] < 1:
            raise ValueError("validation split must be nonempty")
        if self.task_kind == "regression" and self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive for regression")

    def split(self, which: str):
        if which == "train":
            return self.x_tr, self.y_tr
        if which == "val":
            return self.x_val, self.y_val
        raise ValueError(f"unknown split {which!r}")


class _CallCounter:
    """Thread-safe integer counter for HVP-call accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    @property
    def count(self) -> int:
        return self._count

    def increment(self) -> None:
        with self._lock:
            self._count += 1

    def reset(self) -> None:
        with self._lock:
            self._count = 0


class GradientOracle:
    """Interface: expected nll value / gradient / HVP at a variational point.

    All three are deterministic for fixed (v, split, mc_budget, seed).
    Implementations must increment ``hvp_counter`` exactly once per
    ``nll_hvp`` call.
    """

    dim: int

    def __init__(self):
        self.hvp_counter = _CallCounter()
        self.grad_counter = _CallCounter()

    @property
    def hvp_calls(self) -> int:
        return self.hvp_counter.count

    def expected_nll(self, v, data, split, mc_budget=None, seed=0) -> float:
        raise NotImplementedError

    def nll_grad(self, v, data, split, mc_budget=None, seed=0) -> TangentVector:
        raise NotImplementedError

    def nll_hvp(self, v, data, split, vec, mc_budget=None, seed=0) -> TangentVector:
        raise NotImplementedError


class LinearGaussianModel(GradientOracle):
    """Closed-form expected nll for y = x^T theta + AWGN under q = N(m_t, D_t).

    E_q[-log p] = (1/(2 sigma^2)) sum_n [ (y_n - x_n^T m_t)^2 + x_n^T D_t x_n ]
    up to an additive constant.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def _check(self, v: VariationalParams, data: TaskData):
        if data.task_kind != "regression":
            raise ValueError("linear model handles regression tasks only")
        if v.dim != self.dim:
            raise ValueError("variational dimension mismatch")

    def expected_nll(self, v, data, split, mc_budget=None, seed=0) -> float:
        self._check(v, data)
        x, y = data.split(split)
        resid = y - x.T @ v.mean
        quad = np.sum((x * x).sum(axis=1) * v.var)
        return float((resid @ resid + quad) / (2.0 * data.noise_sigma ** 2))

    def nll_grad(self, v, data, split, mc_budget=None, seed=0) -> TangentVector:
        self._check(v, data)
        self.grad_counter.increment()
        x, y = data.split(split)
        s2 = data.noise_sigma ** 2
        g_mean = (x @ (x.T @ v.mean) - x @ y) / s2
        g_var = (x * x).sum(axis=1) / (2.0 * s2)  # constant in v
        return TangentVector(g_mean, g_var)

    def nll_hvp(self, v, data, split, vec, mc_budget=None, seed=0) -> TangentVector:
        self._check(v, data)
        self.hvp_counter.increment()
        x, _ = data.split(split)
        h_mean = x @ (x.T @ vec.wrt_mean) / data.noise_sigma ** 2
        return TangentVector(h_mean, np.zeros(self.dim))


def mlp_param_count(widths: Sequence[int]) -> int:
    return sum(widths[i + 1] * widths[i] + widths[i + 1]
               for i in range(len(widths) - 1))


class MLPModel(GradientOracle):
    """Tanh MLP with Monte Carlo expected nll and manual reverse-mode gradients.

    ``widths`` gives layer sizes, e.g. [1, 40, 40, 1]. Hidden layers use tanh,
    the output layer is linear. Regression uses squared error / (2 sigma^2);
    classification uses softmax cross-entropy (sigma is ignored).

    The HVP is (g(v + h vec) - g(v - h vec)) / (2h) with the same seed on both
    sides, h = fd_epsilon * (1 + ||v||_inf) / max(||vec||_inf, tiny).
    """

    def __init__(self, widths: Sequence[int], fd_epsilon: float = FD_EPSILON):
        super().__init__()
        self.widths = list(widths)
        self.dim = mlp_param_count(self.widths)
        self.fd_epsilon = fd_epsilon

    def _unpack(self, params: np.ndarray):
        """Split (S, p) parameter rows into per-layer weights/biases."""
        out = []
        ofs = 0
        for i in range(len(self.widths) - 1):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            w = params[:, ofs:ofs + n_out * n_in].reshape(-1, n_out, n_in)
            ofs += n_out * n_in
            b = params[:, ofs:ofs + n_out]
            ofs += n_out
            out.append((w, b))
        return out

    def _forward(self, params: np.ndarray, x: np.ndarray):
        """Forward pass for S parameter samples over N inputs.

        Returns the output (S, w_out, N) and the per-layer activations needed
        for backprop.
        """
        layers = self._unpack(params)
        acts = [np.broadcast_to(x, (params.shape[0],) + x.shape)]
        h = acts[0]
        for li, (w, b) in enumerate(layers):
            z = np.einsum("soi,sin->son", w, h) + b[:, :, None]
            h = np.tanh(z) if li < len(layers) - 1 else z
            acts.append(h)
        return h, acts, layers

    def _per_sample_nll(self, out: np.ndarray, y: np.ndarray, data: TaskData):
        """nll per MC sample (summed over data points) and d nll / d out."""
        if data.task_kind == "regression":
            resid = out[:, 0, :] - y[None, :]
            s2 = data.noise_sigma ** 2
            nll = 0.5 * np.sum(resid ** 2, axis=1) / s2
            dout = np.zeros_like(out)
            dout[:, 0, :] = resid / s2
            return nll, dout
        # softmax cross-entropy with integer labels
        labels = y.astype(int)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = np.arange(out.shape[2])
        nll = -logp[:, labels, n].sum(axis=1)
        dout = np.exp(logp)
        dout[:, labels, n] -= 1.0
        return nll, dout

    def _backward(self, acts, layers, dout: np.ndarray) -> np.ndarray:
        """Accumulate d nll / d params, returning (S, p) gradients."""
        n_layers = len(layers)
        grads = [None] * n_layers
        delta = dout
        for li in range(n_layers - 1, -1, -1):
            w, _ = layers[li]
            h_in = acts[li]
            gw = np.einsum("son,sin->soi", delta, h_in)
            gb = delta.sum(axis=2)
            grads[li] = (gw, gb)
            if li > 0:
                delta = np.einsum("soi,son->sin", w, delta)
                delta = delta * (1.0 - acts[li] ** 2)
        flat = [np.concatenate([gw.reshape(gw.shape[0], -1), gb], axis=1)
                for gw, gb in grads]
        return np.concatenate(flat, axis=1)

    def _sample(self, v: VariationalParams, mc_budget: int, seed: int):
        """Antithetic reparameterized samples (S, p) and their eps draws.

        Pairing eps with -eps cancels odd-order MC noise in the pathwise
        variance gradient exactly; an odd budget leaves one unpaired draw.
        """
        half = (mc_budget + 1) // 2
        eps = standard_normal((half, v.dim), seed)
        eps = np.concatenate([eps, -eps], axis=0)[:mc_budget]
        theta = v.mean[None, :] + np.sqrt(v.var)[None, :] * eps
        return theta, eps

    def _check(self, v: VariationalParams, mc_budget):
        if v.dim != self.dim:
            raise ValueError(
                f"parameter count mismatch: network has {self.dim}, got {v.dim}")
        if mc_budget is None or mc_budget < 1:
            raise ValueError("mc_budget must be >= 1")

    def expected_nll(self, v, data, split, mc_budget=None, seed=0) -> float:
        self._check(v, mc_budget)
        x, y = data.split(split)
        theta, _ = self._sample(v, mc_budget, seed)
        out, _, _ = self._forward(theta, x)
        nll, _ = self._per_sample_nll(out, y, data)
        return float(nll.mean())

    def nll_grad(self, v, data, split, mc_budget=None, seed=0) -> TangentVector:
        self._check(v, mc_budget)
        self.grad_counter.increment()
        x, y = data.split(split)
        theta, eps = self._sample(v, mc_budget, seed)
        out, acts, layers = self._forward(theta, x)
        _, dout = self._per_sample_nll(out, y, data)
        g_theta = self._backward(acts, layers, dout)  # (S, p)
        # pathwise rule: d theta / d d = eps / (2 sqrt d)
        sqrt_d = np.sqrt(v.var)
        g_mean = g_theta.mean(axis=0)
        g_var = (g_theta * eps / (2.0 * np.maximum(sqrt_d, 1e-300))[None, :]).mean(axis=0)
        return TangentVector(g_mean, g_var)

    def nll_hvp(self, v, data, split, vec, mc_budget=None, seed=0) -> TangentVector:
        self._check(v, mc_budget)
        self.hvp_counter.increment()
        vnorm = max(np.abs(v.mean).max(), np.abs(v.var).max())
        vecnorm = max(np.abs(vec.wrt_mean).max(), np.abs(vec.wrt_var).max())
        if vecnorm == 0.0:
            return TangentVector.zeros(self.dim)
        h = self.fd_epsilon * (1.0 + vnorm) / vecnorm
        # keep perturbed variances positive
        d = v.var
        with np.errstate(divide="ignore"):
            if np.any(vec.wrt_var != 0):
                limit = 0.5 * np.min(np.where(vec.wrt_var != 0,
                                              d / np.maximum(np.abs(vec.wrt_var), 1e-300),
                                              np.inf))
                h = min(h, limit)
        v_plus = VariationalParams.from_var(v.mean + h * vec.wrt_mean,
                                            d + h * vec.wrt_var)
        v_minus = VariationalParams.from_var(v.mean - h * vec.wrt_mean,
                                             d - h * vec.wrt_var)
        g_plus = self.nll_grad(v_plus, data, split, mc_budget, seed)
        g_minus = self.nll_grad(v_minus, data, split, mc_budget, seed)
        return TangentVector((g_plus.wrt_mean - g_minus.wrt_mean) / (2 * h),
                             (g_plus.wrt_var - g_minus.wrt_var) / (2 * h))
