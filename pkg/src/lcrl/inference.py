"""Stochastic-gradient ELBO maximization and posterior reporting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp

from .kernel import class_loglik
from .latent import log_membership, posterior_memberships
from .model import ClassParams, MembershipParams, ModelSpec, PanelDataset
from .variational import NonFiniteError, VariationalModel, VariationalState

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """No restart reached a finite ELBO."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class FitConfig:
    iterations: int = 2000
    n_samples: int = 16
    restarts: int = 5
    learning_rate: float = 0.05
    final_lr_fraction: float = 0.1
    tolerance: float = 1e-3
    patience: int = 200
    smoothing_window: int = 50
    seed: int = 0
    eval_samples: int = 256
    init_sd: float = 0.1
    init_jitter: float = 0.1
    eta_covariance: str = "diagonal"


class Adam:
    """Adam ascent on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: NDArray[np.float64], grad: NDArray[np.float64],
             lr: float | None = None) -> NDArray[np.float64]:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad ** 2
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        step = (self.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + self.eps)
        return params + step


@dataclass
class FitResult:
    state: VariationalState
    elbo: float
    diagnostics: dict = field(default_factory=dict)


def _kmeans_labels(features: NDArray[np.float64], k: int, rng: np.random.Generator,
                   n_iter: int = 10) -> NDArray[np.int64]:
    n = features.shape[0]
    centers = features[rng.choice(n, size=k, replace=n < k)]
    centers = centers + 1e-3 * rng.standard_normal(centers.shape)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        dist = ((features[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        for j in range(k):
            if np.any(labels == j):
                centers[j] = features[labels == j].mean(axis=0)
    return labels


def choice_share_features(model: VariationalModel) -> NDArray[np.float64]:
    """Per-respondent share of each alternative, separately by context."""
    arr = model.arrays
    feats = []
    for ctx in (False, True):
        sel = arr.mask & (arr.is_sp == ctx)
        total = sel.sum(axis=1)
        for i in range(model.n_alt):
            hits = ((arr.choices == i) & sel).sum(axis=1)
            overall = ((arr.choices == i) & arr.mask).sum(axis=1) / np.maximum(arr.mask.sum(axis=1), 1)
            feats.append(np.where(total > 0, hits / np.maximum(total, 1), overall))
    return np.column_stack(feats)


def init_state(model: VariationalModel, rng: np.random.Generator, config: FitConfig) -> VariationalState:
    """Jittered-prior means, small scales, and k-means seeded class probabilities."""
    K, N = model.K, model.N
    state = model.prior_state()
    state.class_mean = state.class_mean + config.init_jitter * rng.standard_normal(state.class_mean.shape)
    state.class_logsd = np.full_like(state.class_logsd, math.log(config.init_sd))
    state.eta_mean = state.eta_mean + config.init_jitter * rng.standard_normal(state.eta_mean.shape)
    if state.full_covariance:
        d = model.D
        scale = np.zeros_like(state.eta_scale)
        idx = np.arange(d)
        scale[:, idx, idx] = math.log(config.init_sd)
        state.eta_scale = scale
    else:
        state.eta_scale = np.full_like(state.eta_scale, math.log(config.init_sd))
    if K > 1 and N > 0:
        labels = _kmeans_labels(choice_share_features(model), K, rng)
        logits = np.zeros((N, K))
        logits[np.arange(N), labels] = 2.0
        state.pi_logits = logits
    return state


def _moving_average(trace: list[float], window: int) -> float:
    return float(np.mean(trace[-window:]))


def _run_one(model: VariationalModel, state: VariationalState, rng: np.random.Generator,
             config: FitConfig):
    flat = state.pack()
    opt = Adam(flat.size, config.learning_rate)
    trace: list[float] = []
    smoothed: list[float] = []
    converged = False
    n_iter = config.iterations
    for it in range(n_iter):
        frac = it / max(n_iter - 1, 1)
        lr = config.learning_rate * config.final_lr_fraction ** frac
        value, grad, _ = model.evaluate(state, config.n_samples, rng, want_grad=True)
        trace.append(value)
        smoothed.append(_moving_average(trace, config.smoothing_window))
        flat = opt.step(flat, grad.pack(), lr)
        state = state.unpack(flat)
        lag = config.patience
        if it >= lag + config.smoothing_window and smoothed[-1] - smoothed[-1 - lag] < config.tolerance:
            converged = True
            break
    return state, trace, converged


def fit(dataset: PanelDataset, spec: ModelSpec, config: FitConfig | None = None) -> FitResult:
    """Maximize the ELBO with Adam from several random starts; keep the best."""
    config = config or FitConfig()
    model = VariationalModel(dataset, spec, config.eta_covariance)
    seeds = np.random.SeedSequence(config.seed).spawn(max(config.restarts, 1) + 1)
    eval_seed = seeds[-1]
    runs = []
    for r in range(max(config.restarts, 1)):
        rng = np.random.default_rng(seeds[r])
        state = init_state(model, rng, config)
        try:
            state, trace, converged = _run_one(model, state, rng, config)
            final = model.evaluate(state, config.eval_samples, np.random.default_rng(eval_seed))[0]
        except NonFiniteError as exc:
            log.warning("restart %d diverged: %s", r, exc)
            runs.append({"restart": r, "error": str(exc)})
            continue
        log.info("restart %d: elbo %.4f after %d iterations", r, final, len(trace))
        runs.append({"restart": r, "state": state, "trace": trace, "elbo": final,
                     "converged": converged})
    ok = [run for run in runs if "state" in run]
    summary = [{"restart": run["restart"], "elbo": run.get("elbo"), "error": run.get("error")}
               for run in runs]
    if not ok:
        raise FitError("no restart reached a finite ELBO",
                       {"seed": config.seed, "restarts": summary})
    best = max(ok, key=lambda run: run["elbo"])
    diagnostics = {
        "seed": config.seed,
        "restart_index": best["restart"],
        "iterations": len(best["trace"]),
        "converged": bool(best["converged"]),
        "elbo": best["elbo"],
        "elbo_trace": best["trace"],
        "restarts": summary,
    }
    return FitResult(best["state"], best["elbo"], diagnostics)


# -- reporting -----------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    parameter: str
    cls: int | None  # 1-based class, None for class-free rows
    mean: float
    sd: float

    @property
    def z(self) -> float:
        if self.sd > 0:
            return self.mean / self.sd
        return math.copysign(math.inf, self.mean) if self.mean != 0 else math.nan

    @property
    def degenerate(self) -> bool:
        return not self.sd > 0


def class_shares(state: VariationalState) -> NDArray[np.float64]:
    return state.pi.mean(axis=0)


def permute_classes(state: VariationalState, perm) -> VariationalState:
    """Reorder classes so new class j is old class ``perm[j]``.

    The membership coefficients are re-expressed against the new reference
    class (the last one); when the reference moves, the new coefficients are
    differences of two independent normals and their covariances add.
    """
    perm = np.asarray(perm, dtype=int)
    K = state.n_classes
    out = state.copy()
    out.class_mean = state.class_mean[perm]
    out.class_logsd = state.class_logsd[perm]
    out.pi_logits = state.pi_logits[:, perm]
    if K == 1:
        return out
    d = state.eta_mean.shape[1]
    mean_full = np.vstack([state.eta_mean, np.zeros((1, d))])
    cov_full = np.zeros((K, d, d))
    chol = state.eta_chol()
    cov_full[:K - 1] = chol @ np.transpose(chol, (0, 2, 1))
    ref = perm[K - 1]
    new_mean = mean_full[perm[:K - 1]] - mean_full[ref]
    new_cov = cov_full[perm[:K - 1]] + cov_full[ref][None]
    out.eta_mean = new_mean
    if state.full_covariance:
        new_chol = np.linalg.cholesky(new_cov)
        idx = np.arange(d)
        raw = np.tril(new_chol, -1)
        raw[:, idx, idx] = np.log(new_chol[:, idx, idx])
        out.eta_scale = raw
    else:
        out.eta_scale = 0.5 * np.log(np.diagonal(new_cov, axis1=1, axis2=2))
    return out


def canonicalize(state: VariationalState) -> tuple[VariationalState, NDArray[np.int64]]:
    """Sort classes by descending class share (stable on ties)."""
    perm = np.argsort(-class_shares(state), kind="stable")
    return permute_classes(state, perm), perm


def posterior_summary(state: VariationalState, model: VariationalModel, n_samples: int = 20000,
                      rng: np.random.Generator | None = None) -> list[SummaryRow]:
    """Posterior mean and sd of every natural-space parameter, plus class shares.

    Normal factors are reported exactly. Sensitivities use lognormal moments;
    learning rates and initial expectations are pushed through their sigmoid
    transforms by sampling.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rows: list[SummaryRow] = []
    nf = model.nf
    alts = model.dataset.alternatives
    free_names = [alts[i].name for i in model.free_idx]
    eps = rng.standard_normal(n_samples)
    for k in range(state.n_classes):
        mu, sd = state.class_mean[k], state.class_sd[k]
        for j, name in enumerate(free_names):
            rows.append(SummaryRow(f"gamma_ds[{name}]", k + 1, float(mu[j]), float(sd[j])))
        for j, name in enumerate(free_names):
            rows.append(SummaryRow(f"gamma_sp[{name}]", k + 1, float(mu[nf + j]), float(sd[nf + j])))
        for j, label in ((2 * nf, "beta_ds"), (2 * nf + 1, "beta_sp")):
            m, s = mu[j], sd[j]
            mean = math.exp(m + s ** 2 / 2)
            var = math.expm1(s ** 2) * math.exp(2 * m + s ** 2)
            rows.append(SummaryRow(label, k + 1, mean, math.sqrt(var)))
        draws = expit(mu[2 * nf + 2] + sd[2 * nf + 2] * eps)
        rows.append(SummaryRow("alpha", k + 1, float(draws.mean()), float(draws.std())))
        for j, i in enumerate(model.est_idx):
            c = 2 * nf + 3 + j
            a, b = model.q0_lower[j], model.q0_upper[j]
            draws = a + (b - a) * expit(mu[c] + sd[c] * eps)
            rows.append(SummaryRow(f"q0[{alts[i].name}]", k + 1, float(draws.mean()),
                                   float(draws.std())))
    esd = state.eta_sd()
    for k in range(state.n_classes - 1):
        for d, cov in enumerate(model.dataset.covariate_names):
            rows.append(SummaryRow(f"eta[{cov}]", k + 1, float(state.eta_mean[k, d]),
                                   float(esd[k, d])))
    shares = class_shares(state) if model.N else np.full(state.n_classes, 1.0 / state.n_classes)
    for k, share in enumerate(shares):
        rows.append(SummaryRow("class_share", k + 1, float(share), 0.0))
    return rows


def point_estimates(rows: list[SummaryRow], model: VariationalModel
                    ) -> tuple[list[ClassParams], MembershipParams]:
    """Posterior-mean ClassParams per class and membership coefficients."""
    alts = model.dataset.alternatives
    K = max(r.cls for r in rows if r.parameter == "class_share")
    by_key = {(r.parameter, r.cls): r.mean for r in rows}
    params = []
    free = [alts[i].name for i in model.free_idx]
    for k in range(1, K + 1):
        params.append(ClassParams.build(
            alts,
            gamma_ds=[by_key[(f"gamma_ds[{n}]", k)] for n in free],
            gamma_sp_shift=[by_key[(f"gamma_sp[{n}]", k)] for n in free],
            beta_ds=by_key[("beta_ds", k)], beta_sp=by_key[("beta_sp", k)],
            alpha=by_key[("alpha", k)],
            q0=[by_key[(f"q0[{alts[i].name}]", k)] for i in model.est_idx]))
    cov = model.dataset.covariate_names
    eta = np.array([[by_key[(f"eta[{c}]", k)] for c in cov] for k in range(1, K)]).reshape(K - 1, len(cov))
    return params, MembershipParams(eta)


def posterior_memberships_at_mean(dataset: PanelDataset, spec: ModelSpec,
                                  params: list[ClassParams], eta: MembershipParams):
    """Bayes-rule class probabilities evaluated at posterior-mean parameters."""
    return posterior_memberships(dataset, params, eta, spec.reset_on_context_switch)


def posterior_memberships_sampled(state: VariationalState, model: VariationalModel,
                                  n_samples: int = 200, rng: np.random.Generator | None = None):
    """Bayes-rule class probabilities averaged over draws from the approximation."""
    rng = rng if rng is not None else np.random.default_rng(0)
    eps_class, eps_eta = model.draw_noise(n_samples, rng)
    S, K, N = n_samples, model.K, model.N
    latent = state.class_mean[None] + state.class_sd[None] * eps_class
    batch, _, _ = model.to_batch(latent)
    ll = class_loglik(model.arrays, batch, model.sign, model.spec.reset_on_context_switch)
    joint = np.transpose(ll.reshape(S, K, N), (0, 2, 1))
    if K > 1:
        chol = state.eta_chol()
        eta = state.eta_mean[None] + np.einsum("kij,skj->ski", chol, eps_eta)
        for s in range(S):
            joint[s] += log_membership(model.arrays.covariates, eta[s])
    post = np.exp(joint - logsumexp(joint, axis=2, keepdims=True))
    return post.mean(axis=0)
