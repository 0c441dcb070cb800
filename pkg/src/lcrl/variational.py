"""Mean-field variational family, ELBO estimator and its reparameterization gradient.

Latent coordinates per class, in order: free gamma_ds entries, free
gamma_sp shift entries, log beta_ds, log beta_sp, z_alpha, z_q0 for each
estimated initial expectation. All of them get independent normal factors
(a lognormal on beta is a normal on log beta). Membership coefficients get a
diagonal or full-covariance normal per non-reference class, and each
respondent a categorical factor parameterized by softmax logits.

Class assignments are summed out exactly inside the expected log-joint, so
only the continuous latents are sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit, logsumexp

from .kernel import ClassBatch, class_loglik
from .latent import log_membership
from .model import ModelSpec, PanelDataset, free_parameter_names


class NonFiniteError(FloatingPointError):
    """ELBO or gradient evaluation produced inf/nan."""

    def __init__(self, what: str, latent: str):
        super().__init__(f"non-finite {what}; offending latent: {latent}")
        self.latent = latent


def transform_alpha(z):
    return expit(z)


def inverse_alpha(alpha):
    return logit(alpha)


def transform_q0(z, a, b):
    return a + (b - a) * expit(z)


def inverse_q0(q0, a, b):
    return logit((np.asarray(q0, dtype=float) - a) / (b - a))


def kl_normal(mean, sd, prior_mean, prior_sd):
    """Elementwise KL(N(mean, sd^2) || N(prior_mean, prior_sd^2))."""
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    return (np.log(prior_sd) - np.log(sd)
            + (sd ** 2 + (mean - prior_mean) ** 2) / (2.0 * prior_sd ** 2) - 0.5)


def kl_mvn_isotropic(mean, chol, prior_mean, prior_sd):
    """KL(N(mean, chol chol^T) || N(prior_mean, prior_sd^2 I))."""
    d = mean.shape[-1]
    var = prior_sd ** 2
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    return 0.5 * (np.sum(chol ** 2, axis=(-2, -1)) / var
                  + np.sum((mean - prior_mean) ** 2, axis=-1) / var
                  - d + d * np.log(var) - 2.0 * np.sum(np.log(diag), axis=-1))


@dataclass
class VariationalState:
    """All variational parameters.

    ``eta_scale`` is (K-1, D) of log-sds for the diagonal family, or (K-1, D, D)
    lower-triangular raw Cholesky factors (diagonal stored as logs) for the
    full-covariance family.
    """

    class_mean: NDArray[np.float64]   # (K, P)
    class_logsd: NDArray[np.float64]  # (K, P)
    eta_mean: NDArray[np.float64]     # (K-1, D)
    eta_scale: NDArray[np.float64]
    pi_logits: NDArray[np.float64]    # (N, K)

    @property
    def n_classes(self) -> int:
        return self.class_mean.shape[0]

    @property
    def full_covariance(self) -> bool:
        return self.eta_scale.ndim == 3

    @property
    def pi(self) -> NDArray[np.float64]:
        lg = self.pi_logits
        return np.exp(lg - logsumexp(lg, axis=1, keepdims=True))

    @property
    def class_sd(self) -> NDArray[np.float64]:
        return np.exp(self.class_logsd)

    def eta_chol(self) -> NDArray[np.float64]:
        """(K-1, D, D) Cholesky factors of the membership covariances."""
        if not self.full_covariance:
            return np.stack([np.diag(np.exp(r)) for r in self.eta_scale]) if len(self.eta_scale) \
                else np.zeros((0,) + self.eta_scale.shape[1:] * 2)
        lower = np.tril(self.eta_scale, -1)
        d = self.eta_scale.shape[-1]
        idx = np.arange(d)
        lower[:, idx, idx] = np.exp(self.eta_scale[:, idx, idx])
        return lower

    def eta_sd(self) -> NDArray[np.float64]:
        if not self.full_covariance:
            return np.exp(self.eta_scale)
        chol = self.eta_chol()
        return np.sqrt(np.sum(chol ** 2, axis=-1))

    def pack(self) -> NDArray[np.float64]:
        parts = [self.class_mean.ravel(), self.class_logsd.ravel(), self.eta_mean.ravel()]
        if self.full_covariance:
            d = self.eta_scale.shape[-1]
            rows, cols = np.tril_indices(d)
            parts.append(self.eta_scale[:, rows, cols].ravel())
        else:
            parts.append(self.eta_scale.ravel())
        if self.n_classes > 1:
            parts.append(self.pi_logits.ravel())
        return np.concatenate(parts)

    def unpack(self, flat: NDArray[np.float64]) -> "VariationalState":
        """New state with this state's shapes, filled from a flat vector."""
        out, pos = [], 0
        for arr in (self.class_mean, self.class_logsd, self.eta_mean):
            out.append(flat[pos:pos + arr.size].reshape(arr.shape))
            pos += arr.size
        if self.full_covariance:
            k1, d, _ = self.eta_scale.shape
            rows, cols = np.tril_indices(d)
            m = rows.size * k1
            scale = np.zeros_like(self.eta_scale)
            scale[:, rows, cols] = flat[pos:pos + m].reshape(k1, -1)
            pos += m
        else:
            scale = flat[pos:pos + self.eta_scale.size].reshape(self.eta_scale.shape)
            pos += self.eta_scale.size
        if self.n_classes > 1:
            logits = flat[pos:pos + self.pi_logits.size].reshape(self.pi_logits.shape)
            pos += self.pi_logits.size
        else:
            logits = self.pi_logits.copy()
        assert pos == flat.size
        return VariationalState(out[0].copy(), out[1].copy(), out[2].copy(),
                                np.array(scale), np.array(logits))

    def copy(self) -> "VariationalState":
        return VariationalState(self.class_mean.copy(), self.class_logsd.copy(),
                                self.eta_mean.copy(), self.eta_scale.copy(),
                                self.pi_logits.copy())


class VariationalModel:
    """Binds a dataset and model spec to the variational family.

    Holds the padded data arrays, prior vectors, and the index maps between
    latent coordinates and the kernel's natural parameters.
    """

    def __init__(self, dataset: PanelDataset, spec: ModelSpec, eta_covariance: str = "diagonal"):
        if eta_covariance not in ("diagonal", "full"):
            raise ValueError(f"eta_covariance must be 'diagonal' or 'full', not {eta_covariance!r}")
        self.dataset = dataset
        self.spec = spec
        self.eta_covariance = eta_covariance
        self.arrays = dataset.to_arrays()
        self.sign = dataset.polarity_sign
        alts = dataset.alternatives
        self.n_alt = len(alts)
        self.free_idx = np.array([i for i, a in enumerate(alts) if not a.gamma_identified], dtype=int)
        self.est_idx = np.array([i for i, a in enumerate(alts) if a.q0_estimated], dtype=int)
        self.q0_lower = np.array([alts[i].q0_lower for i in self.est_idx], dtype=float)
        self.q0_upper = np.array([alts[i].q0_upper for i in self.est_idx], dtype=float)
        self.q0_fixed = np.array([a.q0_fixed if a.q0_fixed is not None else 0.0 for a in alts])
        nf, ne = len(self.free_idx), len(self.est_idx)
        self.nf, self.ne = nf, ne
        self.n_class_latents = 2 * nf + 3 + ne
        self.latent_names = free_parameter_names(alts)
        self.latent_names[2 * nf] = "log_beta_ds"
        self.latent_names[2 * nf + 1] = "log_beta_sp"
        self.latent_names[2 * nf + 2] = "z_alpha"
        for j, i in enumerate(self.est_idx):
            self.latent_names[2 * nf + 3 + j] = f"z_q0[{alts[i].name}]"
        pr = spec.priors
        self.prior_mean = np.array([pr.gamma[0]] * (2 * nf) + [pr.log_beta[0]] * 2
                                   + [pr.z_alpha[0]] + [pr.z_q0[0]] * ne)
        self.prior_sd = np.array([pr.gamma[1]] * (2 * nf) + [pr.log_beta[1]] * 2
                                 + [pr.z_alpha[1]] + [pr.z_q0[1]] * ne)
        self.K = spec.n_classes
        self.D = self.arrays.covariates.shape[1]
        self.N = self.arrays.n_respondents

    # -- state helpers -------------------------------------------------

    def prior_state(self, pi_logits=None) -> VariationalState:
        """State equal to the prior in every continuous factor."""
        K, D, P = self.K, self.D, self.n_class_latents
        pr = self.spec.priors
        class_mean = np.tile(self.prior_mean, (K, 1))
        class_logsd = np.tile(np.log(self.prior_sd), (K, 1))
        eta_mean = np.full((K - 1, D), pr.eta[0])
        if self.eta_covariance == "full":
            eta_scale = np.zeros((K - 1, D, D))
            idx = np.arange(D)
            eta_scale[:, idx, idx] = np.log(pr.eta[1])
        else:
            eta_scale = np.full((K - 1, D), np.log(pr.eta[1]))
        if pi_logits is None:
            pi_logits = np.zeros((self.N, K))
        return VariationalState(class_mean, class_logsd, eta_mean, eta_scale,
                                np.array(pi_logits, dtype=float))

    def flat_names(self) -> list[str]:
        """Human-readable name of every packed variational coordinate."""
        K, D = self.K, self.D
        cov = self.dataset.covariate_names
        names = [f"class{k + 1}.mean.{n}" for k in range(K) for n in self.latent_names]
        names += [f"class{k + 1}.logsd.{n}" for k in range(K) for n in self.latent_names]
        names += [f"eta{k + 1}.mean[{c}]" for k in range(K - 1) for c in cov]
        if self.eta_covariance == "full":
            rows, cols = np.tril_indices(D)
            names += [f"eta{k + 1}.chol[{cov[r]},{cov[c]}]" for k in range(K - 1)
                      for r, c in zip(rows, cols)]
        else:
            names += [f"eta{k + 1}.logsd[{c}]" for k in range(K - 1) for c in cov]
        if K > 1:
            names += [f"pi_logit[{r.id},{k + 1}]" for r in self.dataset.respondents
                      for k in range(K)]
        return names

    def to_batch(self, latent: NDArray[np.float64]):
        """Map latent draws of shape (..., P) to a flattened ClassBatch and chain factors."""
        lead = latent.shape[:-1]
        x = latent.reshape(-1, self.n_class_latents)
        nf, B = self.nf, x.shape[0]
        gamma_ds = np.zeros((B, self.n_alt))
        gamma_sp = np.zeros((B, self.n_alt))
        gamma_ds[:, self.free_idx] = x[:, :nf]
        gamma_sp[:, self.free_idx] = x[:, nf:2 * nf]
        beta_ds = np.exp(x[:, 2 * nf])
        beta_sp = np.exp(x[:, 2 * nf + 1])
        alpha = expit(x[:, 2 * nf + 2])
        s_q = expit(x[:, 2 * nf + 3:])
        q0 = np.tile(self.q0_fixed, (B, 1))
        width = self.q0_upper - self.q0_lower
        q0[:, self.est_idx] = self.q0_lower + width * s_q
        chain = np.ones_like(x)
        chain[:, 2 * nf] = beta_ds
        chain[:, 2 * nf + 1] = beta_sp
        chain[:, 2 * nf + 2] = alpha * (1.0 - alpha)
        chain[:, 2 * nf + 3:] = width * s_q * (1.0 - s_q)
        return ClassBatch(gamma_ds, gamma_sp, beta_ds, beta_sp, alpha, q0), chain, lead

    def natural_gradient_to_latent(self, grads: dict, chain) -> NDArray[np.float64]:
        nf = self.nf
        g = np.empty_like(chain)
        g[:, :nf] = grads["gamma_ds"][:, self.free_idx]
        g[:, nf:2 * nf] = grads["gamma_sp"][:, self.free_idx]
        g[:, 2 * nf] = grads["beta_ds"]
        g[:, 2 * nf + 1] = grads["beta_sp"]
        g[:, 2 * nf + 2] = grads["alpha"]
        g[:, 2 * nf + 3:] = grads["q0"][:, self.est_idx]
        return g * chain

    def draw_noise(self, n_samples: int, rng: np.random.Generator):
        eps_class = rng.standard_normal((n_samples, self.K, self.n_class_latents))
        eps_eta = rng.standard_normal((n_samples, self.K - 1, self.D))
        return eps_class, eps_eta

    # -- objective -----------------------------------------------------

    def kl_terms(self, state: VariationalState) -> dict[str, NDArray[np.float64]]:
        """Per-factor KL divergences of the continuous latents from their priors."""
        pr = self.spec.priors
        out = {"class": kl_normal(state.class_mean, state.class_sd, self.prior_mean, self.prior_sd)}
        if state.full_covariance:
            out["eta"] = kl_mvn_isotropic(state.eta_mean, state.eta_chol(), pr.eta[0], pr.eta[1])
        else:
            out["eta"] = kl_normal(state.eta_mean, np.exp(state.eta_scale), pr.eta[0], pr.eta[1])
        return out

    def evaluate(self, state: VariationalState, n_samples: int, rng=None, want_grad: bool = False,
                 noise=None):
        """Monte-Carlo ELBO (and gradient as a VariationalState-shaped object).

        Returns ``(elbo, grad_state_or_None, per_sample_elbo)``.
        """
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if noise is None:
            noise = self.draw_noise(n_samples, rng)
        eps_class, eps_eta = noise
        S, K, N, P = n_samples, self.K, self.N, self.n_class_latents
        pi = state.pi
        log_pi = np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)), 0.0)

        sd = state.class_sd
        latent = state.class_mean[None] + sd[None] * eps_class  # (S, K, P)
        batch, chain, _ = self.to_batch(latent)
        weights = np.broadcast_to(pi.T[None], (S, K, N)).reshape(S * K, N)
        if want_grad:
            ll, grads = class_loglik(self.arrays, batch, self.sign,
                                     self.spec.reset_on_context_switch, weights, True)
        else:
            ll = class_loglik(self.arrays, batch, self.sign, self.spec.reset_on_context_switch)
        ll = ll.reshape(S, K, N)

        if K > 1:
            if state.full_covariance:
                chol = state.eta_chol()
                eta = state.eta_mean[None] + np.einsum("kij,skj->ski", chol, eps_eta)
            else:
                eta = state.eta_mean[None] + np.exp(state.eta_scale)[None] * eps_eta
            X = self.arrays.covariates
            logits = np.concatenate([np.einsum("nd,skd->snk", X, eta),
                                     np.zeros((S, N, 1))], axis=2)
            logp = logits - logsumexp(logits, axis=2, keepdims=True)  # (S, N, K)
        else:
            logp = np.zeros((S, N, 1))

        joint = logp + np.transpose(ll, (0, 2, 1))  # (S, N, K)
        data_term = np.einsum("snk,nk->s", joint, pi)
        entropy = -np.sum(pi * log_pi)
        kl = self.kl_terms(state)
        kl_total = kl["class"].sum() + kl["eta"].sum()
        per_sample = data_term + entropy - kl_total
        value = float(per_sample.mean())
        if not np.isfinite(value):
            raise NonFiniteError("ELBO", self._culprit(state, ll))
        if not want_grad:
            return value, None, per_sample

        pr = self.spec.priors
        # continuous class latents: reparameterization through the kernel gradients
        g_lat = self.natural_gradient_to_latent(grads, chain).reshape(S, K, P)
        g_mean = g_lat.mean(axis=0)
        g_logsd = (g_lat * eps_class).mean(axis=0) * sd
        g_mean -= (state.class_mean - self.prior_mean) / self.prior_sd ** 2
        g_logsd -= sd ** 2 / self.prior_sd ** 2 - 1.0

        # membership coefficients
        if K > 1:
            resid = pi[None, :, :K - 1] - np.exp(logp[:, :, :K - 1])  # (S, N, K-1)
            g_eta = np.einsum("snk,nd->skd", resid, X)  # (S, K-1, D)
            g_eta_mean = g_eta.mean(axis=0) - (state.eta_mean - pr.eta[0]) / pr.eta[1] ** 2
            if state.full_covariance:
                chol = state.eta_chol()
                g_chol = np.einsum("ski,skj->kij", g_eta, eps_eta) / S
                g_chol = np.tril(g_chol - chol / pr.eta[1] ** 2)
                d = self.D
                idx = np.arange(d)
                # diagonal stored as log: chain rule plus the log-det term
                g_chol[:, idx, idx] = g_chol[:, idx, idx] * chol[:, idx, idx] + 1.0
                g_eta_scale = g_chol
            else:
                esd = np.exp(state.eta_scale)
                g_eta_scale = (g_eta * eps_eta).mean(axis=0) * esd
                g_eta_scale -= esd ** 2 / pr.eta[1] ** 2 - 1.0
            # categorical factors: exact gradient through the softmax
            a = joint.mean(axis=0) - log_pi  # (N, K)
            a = np.where(pi > 0, a, 0.0)
            g_logits = pi * (a - np.sum(pi * a, axis=1, keepdims=True))
        else:
            g_eta_mean = np.zeros_like(state.eta_mean)
            g_eta_scale = np.zeros_like(state.eta_scale)
            g_logits = np.zeros_like(state.pi_logits)

        grad = VariationalState(g_mean, g_logsd, g_eta_mean, g_eta_scale, g_logits)
        flat = grad.pack()
        if not np.all(np.isfinite(flat)):
            names = self.flat_names()
            bad = [names[i] for i in np.flatnonzero(~np.isfinite(flat))]
            raise NonFiniteError("gradient", ", ".join(bad[:5]))
        return value, grad, per_sample

    def _culprit(self, state, ll) -> str:
        names = self.flat_names()
        flat = state.pack()
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            return names[bad[0]]
        for k in range(self.K):
            if not np.all(np.isfinite(ll[:, k])):
                return f"class{k + 1} log-likelihood"
        return "membership logits"


def elbo(dataset: PanelDataset, spec: ModelSpec, vstate: VariationalState, n_samples: int,
         rng: np.random.Generator, eta_covariance: str | None = None) -> float:
    """Monte-Carlo ELBO estimate."""
    cov = eta_covariance or ("full" if vstate.full_covariance else "diagonal")
    return VariationalModel(dataset, spec, cov).evaluate(vstate, n_samples, rng)[0]


def elbo_gradient(dataset: PanelDataset, spec: ModelSpec, vstate: VariationalState,
                  n_samples: int, rng: np.random.Generator) -> VariationalState:
    """Reparameterization gradient of the ELBO, shaped like the state."""
    cov = "full" if vstate.full_covariance else "diagonal"
    return VariationalModel(dataset, spec, cov).evaluate(vstate, n_samples, rng, True)[1]
