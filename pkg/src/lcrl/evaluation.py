"""Model-comparison statistics, class alignment and parameter-recovery metrics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import ClassParams, fmt


@dataclass(frozen=True)
class FitStats:
    loglik: float
    n_params: int
    n_obs: int
    aic: float
    bic: float

    def to_dict(self) -> dict:
        return {"LL": self.loglik, "n_params": self.n_params, "n_obs": self.n_obs,
                "AIC": self.aic, "BIC": self.bic}


def fit_statistics(loglik: float, n_params: int, n_obs: int) -> FitStats:
    """AIC and BIC; ``n_obs`` counts choice observations, not respondents."""
    if n_obs < 1 or n_params < 0:
        raise ValueError("need n_obs >= 1 and n_params >= 0")
    aic = 2.0 * n_params - 2.0 * loglik
    bic = n_params * math.log(n_obs) - 2.0 * loglik
    return FitStats(float(loglik), int(n_params), int(n_obs), aic, bic)


def comparison_table(rows: Sequence[tuple[str, FitStats]]) -> str:
    """Plain-text model comparison table."""
    lines = [f"{'K':<16}{'Nb. Param':>10}{'LL':>12}{'AIC':>12}{'BIC':>12}"]
    best_bic = min(s.bic for _, s in rows) if rows else None
    for label, s in rows:
        mark = " *" if s.bic == best_bic else ""
        lines.append(f"{label:<16}{s.n_params:>10d}{s.loglik:>12.2f}{s.aic:>12.2f}{s.bic:>12.2f}{mark}")
    lines.append("n = choice observations; * lowest BIC")
    return "\n".join(lines)


def class_distance(a: NDArray[np.float64], b: NDArray[np.float64], scales) -> float:
    """Squared distance between two class vectors in standardized units."""
    return float(np.sum(((np.asarray(a) - np.asarray(b)) / scales) ** 2))


def align_classes(truth: Sequence[ClassParams], estimate: Sequence[ClassParams], alternatives,
                  scales=None) -> tuple[int, ...]:
    """Permutation ``perm`` so estimated class ``perm[k]`` matches true class ``k``.

    Minimizes the total squared standardized distance over all K! orderings;
    the first permutation in lexicographic order wins ties.
    """
    if len(truth) != len(estimate):
        raise ValueError("truth and estimate need the same class count")
    t_vecs = [p.free_vector(alternatives) for p in truth]
    e_vecs = [p.free_vector(alternatives) for p in estimate]
    scales = np.ones_like(t_vecs[0]) if scales is None else np.asarray(scales, dtype=float)
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(truth))):
        cost = sum(class_distance(t_vecs[k], e_vecs[perm[k]], scales) for k in range(len(truth)))
        if cost < best_cost:
            best, best_cost = perm, cost
    return tuple(best)


def align_membership(eta_est: NDArray[np.float64], perm: Sequence[int]) -> NDArray[np.float64]:
    """Re-express estimated membership coefficients in the truth's class order.

    Rows are re-normalized so the truth's reference (last) class is zero again.
    """
    K = len(perm)
    eta_est = np.asarray(eta_est, dtype=float).reshape(K - 1, -1)
    full = np.vstack([eta_est, np.zeros((1, eta_est.shape[1]))])
    return full[list(perm[:K - 1])] - full[perm[K - 1]]


@dataclass
class MetricRow:
    parameter: str
    cls: int | None
    bias: float
    nrmse: float
    correlation: float
    r2: float
    n: int
    flags: tuple[str, ...] = ()


@dataclass
class RecoveryReport:
    rows: list[MetricRow]
    permutations: list[tuple[int, ...]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def get(self, parameter: str, cls: int | None = None) -> MetricRow:
        for r in self.rows:
            if r.parameter == parameter and r.cls == cls:
                return r
        raise KeyError((parameter, cls))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "k", "bias", "nrmse", "correlation", "r2", "n", "flags"])
            for r in self.rows:
                w.writerow([r.parameter, "" if r.cls is None else r.cls, fmt(r.bias), fmt(r.nrmse),
                            fmt(r.correlation), fmt(r.r2), r.n, ";".join(r.flags)])

    def pretty(self) -> str:
        lines = [f"{'Parameter':<24}{'k':>3}{'Bias':>9}{'NRMSE':>9}{'Corr':>9}{'R2':>9}"]
        for r in self.rows:
            k = "" if r.cls is None else str(r.cls)
            lines.append(f"{r.parameter:<24}{k:>3}{r.bias:>9.3f}{r.nrmse:>9.3f}"
                         f"{r.correlation:>9.3f}{r.r2:>9.3f}")
        lines.extend(self.notes)
        return "\n".join(lines)


def metric_row(parameter: str, cls: int | None, truths, estimates) -> MetricRow:
    """Bias, range-normalized RMSE, correlation and R^2 of one parameter."""
    t = np.asarray(truths, dtype=float)
    e = np.asarray(estimates, dtype=float)
    if t.shape != e.shape or t.size < 2:
        raise ValueError("need equal-length truth/estimate series with at least 2 entries")
    flags = []
    err = e - t
    bias = float(err.mean())
    rng = float(t.max() - t.min())
    if rng > 0:
        nrmse = float(np.sqrt(np.mean(err ** 2)) / rng)
    else:
        nrmse = math.nan
        flags.append("nrmse_undefined_zero_range")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot if ss_tot > 0 else math.nan
    if np.std(t) > 0 and np.std(e) > 0:
        corr = float(np.clip(np.corrcoef(t, e)[0, 1], -1.0, 1.0))
    else:
        corr = math.nan
        flags.append("correlation_undefined_constant_series")
    return MetricRow(parameter, cls, bias, nrmse, corr, r2, int(t.size), tuple(flags))


def recovery_metrics(truths: dict, estimates: dict, permutations=None) -> RecoveryReport:
    """Metrics for every ``(parameter, class)`` key present in both mappings.

    Values are per-dataset series, already aligned to the truth's class order.
    """
    rows = [metric_row(name, cls, truths[(name, cls)], estimates[(name, cls)])
            for (name, cls) in truths if (name, cls) in estimates]
    return RecoveryReport(rows, list(permutations or []))


def parameter_table(params: Sequence[ClassParams], eta, alternatives, covariate_names,
                    names: Sequence[str]) -> dict:
    """Flatten class and membership parameters into ``{(name, class): value}``."""
    out = {}
    K = len(params)
    for k, p in enumerate(params, start=1):
        for name, v in zip(names, p.free_vector(alternatives)):
            out[(name, k if K > 1 else None)] = float(v)
    eta = np.asarray(eta, dtype=float).reshape(K - 1, -1) if K > 1 else np.zeros((0, 0))
    for k in range(K - 1):
        for d, cov in enumerate(covariate_names):
            out[(f"eta[{cov}]", k + 1)] = float(eta[k, d])
    return out
