"""Batched class-conditional log-likelihood with forward-sensitivity gradients.

One call evaluates B parameter sets (Monte-Carlo draws times classes) against
all N respondents. Gradients are taken of ``sum_n weights[b, n] * ll[b, n]``
with respect to the natural-space parameters of each batch entry. The learning
rate and the initial expectations enter through the expectation recursion, so
their sensitivities are carried forward trial by trial alongside Q.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .model import PanelArrays


@numba.njit(cache=True)
def _batch(gamma_ds, gamma_sp, beta_ds, beta_sp, alpha, q0, weights,
           choices, feedback, is_sp, mask, switch, sign, reset, want_grad):
    n_batch, n_alt = gamma_ds.shape
    n_resp, n_trial = choices.shape
    ll = np.zeros((n_batch, n_resp))
    g_gds = np.zeros((n_batch, n_alt))
    g_gsp = np.zeros((n_batch, n_alt))
    g_bds = np.zeros(n_batch)
    g_bsp = np.zeros(n_batch)
    g_alpha = np.zeros(n_batch)
    g_q0 = np.zeros((n_batch, n_alt))
    q = np.empty(n_alt)
    dq_a = np.empty(n_alt)
    dq_q = np.empty(n_alt)
    u = np.empty(n_alt)
    for b in range(n_batch):
        a = alpha[b]
        for n in range(n_resp):
            w = weights[b, n]
            for i in range(n_alt):
                q[i] = q0[b, i]
                dq_a[i] = 0.0
                dq_q[i] = 1.0
            total = 0.0
            for t in range(n_trial):
                if not mask[n, t]:
                    break
                if reset and switch[n, t]:
                    for i in range(n_alt):
                        q[i] = q0[b, i]
                        dq_a[i] = 0.0
                        dq_q[i] = 1.0
                sp = is_sp[n, t]
                beta = beta_sp[b] if sp else beta_ds[b]
                umax = -np.inf
                for i in range(n_alt):
                    g = gamma_ds[b, i]
                    if sp:
                        g += gamma_sp[b, i]
                    u[i] = g + sign * beta * q[i]
                    if u[i] > umax:
                        umax = u[i]
                s = 0.0
                for i in range(n_alt):
                    s += math.exp(u[i] - umax)
                lse = umax + math.log(s)
                y = choices[n, t]
                total += u[y] - lse
                if want_grad and w != 0.0:
                    for i in range(n_alt):
                        e = -math.exp(u[i] - lse)
                        if i == y:
                            e += 1.0
                        e *= w
                        g_gds[b, i] += e
                        if sp:
                            g_gsp[b, i] += e
                            g_bsp[b] += sign * e * q[i]
                        else:
                            g_bds[b] += sign * e * q[i]
                        g_alpha[b] += sign * beta * e * dq_a[i]
                        g_q0[b, i] += sign * beta * e * dq_q[i]
                r = feedback[n, t]
                delta = r - q[y]
                dq_a[y] = delta + (1.0 - a) * dq_a[y]
                dq_q[y] = (1.0 - a) * dq_q[y]
                q[y] = q[y] + a * delta
            ll[b, n] = total
    return ll, g_gds, g_gsp, g_bds, g_bsp, g_alpha, g_q0


class ClassBatch:
    """Natural-space parameters for B class evaluations, all alternatives expanded."""

    __slots__ = ("gamma_ds", "gamma_sp", "beta_ds", "beta_sp", "alpha", "q0")

    def __init__(self, gamma_ds, gamma_sp, beta_ds, beta_sp, alpha, q0):
        self.gamma_ds = np.ascontiguousarray(gamma_ds, dtype=np.float64)
        self.gamma_sp = np.ascontiguousarray(gamma_sp, dtype=np.float64)
        self.beta_ds = np.ascontiguousarray(beta_ds, dtype=np.float64)
        self.beta_sp = np.ascontiguousarray(beta_sp, dtype=np.float64)
        self.alpha = np.ascontiguousarray(alpha, dtype=np.float64)
        self.q0 = np.ascontiguousarray(q0, dtype=np.float64)

    @classmethod
    def from_params(cls, params) -> "ClassBatch":
        return cls([p.gamma_ds for p in params], [p.gamma_sp_shift for p in params],
                   [p.beta_ds for p in params], [p.beta_sp for p in params],
                   [p.alpha for p in params], [p.q0 for p in params])


def class_loglik(arrays: PanelArrays, batch: ClassBatch, sign: float,
                 reset: bool = False, weights=None, want_grad: bool = False):
    """Per-(batch, respondent) log-likelihoods and, optionally, weighted gradients.

    Returns ``ll`` of shape (B, N) and, when ``want_grad`` is set, a dict of
    gradients keyed by natural parameter name.
    """
    n_batch = batch.alpha.shape[0]
    if weights is None:
        weights = np.ones((n_batch, arrays.n_respondents))
    out = _batch(batch.gamma_ds, batch.gamma_sp, batch.beta_ds, batch.beta_sp, batch.alpha,
                 batch.q0, np.ascontiguousarray(weights, dtype=np.float64),
                 arrays.choices, arrays.feedback, arrays.is_sp, arrays.mask, arrays.switch,
                 float(sign), bool(reset), bool(want_grad))
    if not want_grad:
        return out[0]
    keys = ("gamma_ds", "gamma_sp", "beta_ds", "beta_sp", "alpha", "q0")
    return out[0], dict(zip(keys, out[1:]))
