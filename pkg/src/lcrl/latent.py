"""Class-membership logit, mixture likelihood and posterior class probabilities."""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .kernel import ClassBatch, class_loglik
from .model import ClassParams, MembershipParams, PanelDataset, fmt


def log_membership(covariates: NDArray[np.float64], eta: NDArray[np.float64]) -> NDArray[np.float64]:
    """Log class probabilities for every row of ``covariates``.

    ``eta`` holds the K-1 free rows; the reference class logit is zero.
    Returns an (N, K) array.
    """
    covariates = np.atleast_2d(covariates)
    eta = np.asarray(eta, dtype=float).reshape(-1, covariates.shape[1])
    logits = np.concatenate([covariates @ eta.T, np.zeros((covariates.shape[0], 1))], axis=1)
    return logits - logsumexp(logits, axis=1, keepdims=True)


def membership_probabilities(x_n, eta: MembershipParams | NDArray[np.float64]) -> NDArray[np.float64]:
    """Class probabilities for one respondent's covariate vector."""
    eta = eta.eta if isinstance(eta, MembershipParams) else np.asarray(eta, dtype=float)
    x_n = np.asarray(x_n, dtype=float)
    if eta.size and eta.shape[-1] != x_n.shape[0]:
        raise ValueError(f"covariate length {x_n.shape[0]} does not match eta width {eta.shape[-1]}")
    if eta.size == 0:
        return np.ones(eta.shape[0] + 1 if eta.ndim == 2 else 1)
    return np.exp(log_membership(x_n[None, :], eta)[0])


def class_logliks(dataset: PanelDataset, params: Sequence[ClassParams],
                  reset_on_context_switch: bool = False, arrays=None) -> NDArray[np.float64]:
    """(N, K) matrix of class-conditional sequence log-likelihoods."""
    arrays = arrays if arrays is not None else dataset.to_arrays()
    ll = class_loglik(arrays, ClassBatch.from_params(params), dataset.polarity_sign,
                      reset_on_context_switch)
    return ll.T


def _joint(dataset, params, eta, reset):
    eta = eta.eta if isinstance(eta, MembershipParams) else np.asarray(eta, dtype=float)
    arrays = dataset.to_arrays()
    ll = class_logliks(dataset, params, reset, arrays)
    if len(params) == 1:
        return ll
    return ll + log_membership(arrays.covariates, eta)


def mixture_loglik(dataset: PanelDataset, params: Sequence[ClassParams],
                   eta: MembershipParams | NDArray[np.float64] | None = None,
                   reset_on_context_switch: bool = False) -> float:
    """Total log-likelihood of the panel, classes mixed by the membership logit."""
    if eta is None:
        eta = np.zeros((len(params) - 1, len(dataset.covariate_names)))
    joint = _joint(dataset, params, eta, reset_on_context_switch)
    return float(logsumexp(joint, axis=1).sum())


def posterior_memberships(dataset: PanelDataset, params: Sequence[ClassParams],
                          eta: MembershipParams | NDArray[np.float64] | None = None,
                          reset_on_context_switch: bool = False) -> NDArray[np.float64]:
    """Per-respondent class probabilities given the observed choices (Bayes' rule)."""
    if eta is None:
        eta = np.zeros((len(params) - 1, len(dataset.covariate_names)))
    joint = _joint(dataset, params, eta, reset_on_context_switch)
    return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def write_memberships_csv(path, dataset: PanelDataset, probs: NDArray[np.float64]):
    k = probs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["respondent_id"] + [f"pi_{j + 1}" for j in range(k)])
        for resp, row in zip(dataset.respondents, probs):
            w.writerow([resp.id] + [fmt(v) for v in row])
