"""Synthetic panels drawn from the latent-class RL generative process.

Random-number contract (so runs are reproducible across implementations
given the same uniform stream): for each respondent in order, one uniform
picks the latent class (only when K > 1); then for each trial, one uniform
picks the choice and one uniform resolves the feedback lottery, consumed even
when the chosen alternative's feedback is deterministic. Categories are
sampled by inverse CDF in index order: the first index whose cumulative
probability exceeds the uniform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .latent import membership_probabilities
from .model import (Alternative, ClassParams, MembershipParams, PanelDataset, Respondent,
                    Trial, route_choice_alternatives)
from .rl import QState, choice_probabilities, update_expectation


class FeedbackError(ValueError):
    pass


@dataclass(frozen=True)
class Feedback:
    """Outcome mechanism of one alternative."""

    kind: str  # "deterministic" | "discrete" | "schedule"
    value: float = 0.0
    outcomes: tuple[tuple[float, float], ...] = ()
    schedule: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("deterministic", "discrete", "schedule"):
            raise FeedbackError(f"unknown feedback kind {self.kind!r}")
        if self.kind == "discrete":
            total = sum(p for _, p in self.outcomes)
            if not self.outcomes or abs(total - 1.0) > 1e-9 or any(p < 0 for _, p in self.outcomes):
                raise FeedbackError(f"discrete outcome probabilities must be >= 0 and sum to 1, got {total}")

    def draw(self, t: int, u: float) -> float:
        if self.kind == "deterministic":
            return self.value
        if self.kind == "schedule":
            return self.schedule[t]
        cum = 0.0
        for value, p in self.outcomes:
            cum += p
            if u < cum:
                return value
        return self.outcomes[-1][0]

    def to_dict(self) -> dict:
        if self.kind == "deterministic":
            return {"deterministic": self.value}
        if self.kind == "schedule":
            return {"schedule": list(self.schedule)}
        return {"discrete": [[v, p] for v, p in self.outcomes]}

    @classmethod
    def from_dict(cls, d) -> "Feedback":
        if isinstance(d, (int, float)):
            return cls("deterministic", float(d))
        (kind, body), = d.items()
        if kind == "deterministic":
            return cls(kind, float(body))
        if kind == "schedule":
            return cls(kind, schedule=tuple(float(v) for v in body))
        if kind == "discrete":
            return cls(kind, outcomes=tuple((float(v), float(p)) for v, p in body))
        raise FeedbackError(f"unknown feedback kind {kind!r}")


def route_choice_feedback() -> tuple[Feedback, ...]:
    """Reliable route always 5; unreliable route 2 (p=0.6) or 7 (p=0.4)."""
    return (Feedback("deterministic", 5.0),
            Feedback("discrete", outcomes=((2.0, 0.6), (7.0, 0.4))))


def check_feedback(feedback: Sequence[Feedback], n_alternatives: int, n_trials: int):
    if len(feedback) != n_alternatives:
        raise FeedbackError(f"need one feedback model per alternative ({n_alternatives}), "
                            f"got {len(feedback)}")
    for i, fb in enumerate(feedback, start=1):
        if fb.kind == "schedule" and len(fb.schedule) < n_trials:
            raise FeedbackError(f"feedback schedule of alternative {i} has {len(fb.schedule)} "
                                f"values but {n_trials} trials are required")


@dataclass(frozen=True)
class PanelTemplate:
    """Respondent covariates and context sequences to simulate onto."""

    covariate_names: tuple[str, ...]
    ids: tuple[str, ...]
    covariates: NDArray[np.float64]  # (N, D)
    contexts: tuple[tuple[str, ...], ...]

    @classmethod
    def from_dataset(cls, ds: PanelDataset) -> "PanelTemplate":
        return cls(ds.covariate_names, tuple(r.id for r in ds.respondents),
                   np.array([r.covariates for r in ds.respondents], dtype=float),
                   tuple(tuple(t.context for t in r.trials) for r in ds.respondents))


ROUTE_CHOICE_COVARIATES = ("const", "ds_first", "female", "age_under_40", "income_under_80k",
                           "postgrad")


def route_choice_template(n_respondents: int = 83, trials_per_context: int = 10,
                          seed: int = 20240) -> PanelTemplate:
    """Look-alike of the driving-simulator panel design.

    Dummy prevalences follow the published sample composition (39 of 83 DS
    first, 41 female, 43 under 40, 35 below 80k income, 17 postgraduate),
    scaled to ``n_respondents`` and shuffled independently per covariate.
    DS-first respondents do their DS block first, the others start with SP.
    """
    rng = np.random.default_rng(seed)
    counts = (39, 41, 43, 35, 17)
    cols = [np.ones(n_respondents)]
    for c in counts:
        m = int(round(c * n_respondents / 83))
        col = np.zeros(n_respondents)
        col[:m] = 1.0
        cols.append(rng.permutation(col))
    X = np.column_stack(cols)
    contexts = []
    for ds_first in X[:, 1]:
        first, second = ("DS", "SP") if ds_first else ("SP", "DS")
        contexts.append((first,) * trials_per_context + (second,) * trials_per_context)
    ids = tuple(f"r{n + 1:03d}" for n in range(n_respondents))
    return PanelTemplate(ROUTE_CHOICE_COVARIATES, ids, X, tuple(contexts))


@dataclass(frozen=True)
class TruthRanges:
    """Sampling distributions for true parameters.

    ``("normal", mean, sd)`` or ``("uniform", low, high)``. ``q0`` of ``None``
    draws uniformly inside each estimated alternative's bounds.
    """

    gamma_ds: tuple = ("normal", 0.0, 1.0)
    gamma_sp: tuple = ("normal", 0.0, 1.0)
    beta: tuple = ("uniform", 0.1, 2.0)
    alpha: tuple = ("uniform", 0.05, 0.95)
    q0: tuple | None = None
    eta: tuple = ("normal", 0.0, 1.0)

    @staticmethod
    def _draw(dist, rng, size=None):
        kind, a, b = dist
        if kind == "normal":
            return rng.normal(a, b, size)
        if kind == "uniform":
            return rng.uniform(a, b, size)
        raise ValueError(f"unknown distribution {kind!r}")

    @staticmethod
    def scale(dist) -> float:
        """Standard deviation of a sampling distribution."""
        kind, a, b = dist
        return float(b) if kind == "normal" else float(b - a) / np.sqrt(12.0)

    def class_scales(self, alternatives: Sequence[Alternative]) -> NDArray[np.float64]:
        """Per-coordinate sds in :meth:`ClassParams.free_vector` order."""
        nf = sum(not a.gamma_identified for a in alternatives)
        est = [a for a in alternatives if a.q0_estimated]
        q_scales = [self.scale(self.q0) if self.q0 else (a.q0_upper - a.q0_lower) / np.sqrt(12.0)
                    for a in est]
        return np.array([self.scale(self.gamma_ds)] * nf + [self.scale(self.gamma_sp)] * nf
                        + [self.scale(self.beta)] * 2 + [self.scale(self.alpha)] + q_scales)

    def to_dict(self) -> dict:
        return {k: list(v) if v is not None else None for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "TruthRanges":
        d = d or {}
        return cls(**{k: tuple(v) if v is not None else None for k, v in d.items()})


@dataclass
class TruthRecord:
    params: list[ClassParams]
    membership: MembershipParams
    assignments: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return len(self.params)

    def to_dict(self) -> dict:
        return {
            "classes": [{"gamma_ds": list(p.gamma_ds), "gamma_sp_shift": list(p.gamma_sp_shift),
                         "beta_ds": p.beta_ds, "beta_sp": p.beta_sp, "alpha": p.alpha,
                         "q0": list(p.q0)} for p in self.params],
            "eta": self.membership.eta.tolist(),
            "assignments": [int(a) + 1 for a in self.assignments],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthRecord":
        params = [ClassParams(tuple(c["gamma_ds"]), tuple(c["gamma_sp_shift"]), float(c["beta_ds"]),
                              float(c["beta_sp"]), float(c["alpha"]), tuple(c["q0"]))
                  for c in d["classes"]]
        eta = np.array(d.get("eta", []), dtype=float)
        if eta.size == 0:
            eta = np.zeros((len(params) - 1, 0))
        return cls(params, MembershipParams(eta),
                   np.array([a - 1 for a in d.get("assignments", [])], dtype=np.int64))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def sample_truth(alternatives: Sequence[Alternative], n_classes: int, n_covariates: int,
                 ranges: TruthRanges, rng: np.random.Generator) -> TruthRecord:
    """Draw one set of true class and membership parameters."""
    params = []
    nf = sum(not a.gamma_identified for a in alternatives)
    est = [a for a in alternatives if a.q0_estimated]
    for _ in range(n_classes):
        g_ds = TruthRanges._draw(ranges.gamma_ds, rng, nf)
        g_sp = TruthRanges._draw(ranges.gamma_sp, rng, nf)
        betas = TruthRanges._draw(ranges.beta, rng, 2)
        alpha = float(TruthRanges._draw(ranges.alpha, rng))
        q0 = [float(TruthRanges._draw(ranges.q0, rng)) if ranges.q0 else float(rng.uniform(a.q0_lower, a.q0_upper))
              for a in est]
        params.append(ClassParams.build(alternatives, gamma_ds=g_ds, gamma_sp_shift=g_sp,
                                        beta_ds=betas[0], beta_sp=betas[1], alpha=alpha, q0=q0))
    eta = TruthRanges._draw(ranges.eta, rng, (n_classes - 1, n_covariates))
    return TruthRecord(params, MembershipParams(np.asarray(eta, dtype=float).reshape(n_classes - 1, n_covariates)))


def _inverse_cdf(probs, u: float) -> int:
    cum = 0.0
    for i, p in enumerate(probs):
        cum += p
        if u < cum:
            return i
    return len(probs) - 1


def simulate_dataset(alternatives: Sequence[Alternative], template: PanelTemplate,
                     feedback: Sequence[Feedback], truth: TruthRecord,
                     rng: np.random.Generator, polarity: str = "cost",
                     reset_on_context_switch: bool = False) -> tuple[PanelDataset, TruthRecord]:
    """Generate choices and feedback for every template respondent under ``truth``."""
    alternatives = tuple(alternatives)
    t_max = max((len(c) for c in template.contexts), default=0)
    check_feedback(feedback, len(alternatives), t_max)
    K = truth.n_classes
    respondents = []
    assignments = np.zeros(len(template.ids), dtype=np.int64)
    for n, rid in enumerate(template.ids):
        x = template.covariates[n]
        if K > 1:
            k = _inverse_cdf(membership_probabilities(x, truth.membership), rng.random())
        else:
            k = 0
        assignments[n] = k
        params = truth.params[k]
        state = QState(tuple(params.q0))
        trials = []
        prev = None
        for t, ctx in enumerate(template.contexts[n]):
            if reset_on_context_switch and prev is not None and ctx != prev:
                state = QState(tuple(params.q0), state.trial_cursor)
            prev = ctx
            p = choice_probabilities(state, params, ctx, polarity)
            y = _inverse_cdf(p, rng.random()) + 1
            r = feedback[y - 1].draw(t, rng.random())
            trials.append(Trial(t + 1, ctx, y, float(r)))
            state = update_expectation(state, y, r, params.alpha)
        respondents.append(Respondent(rid, tuple(float(v) for v in x), tuple(trials)))
    ds = PanelDataset(alternatives, tuple(respondents), polarity, tuple(template.covariate_names))
    return ds, TruthRecord(list(truth.params), truth.membership, assignments)


def dataset_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for dataset ``index`` of a batch."""
    return np.random.default_rng([int(seed), int(index)])


def simulate_recovery_batch(n_datasets: int, template: PanelTemplate, n_classes: int,
                            seed: int, alternatives: Sequence[Alternative] | None = None,
                            feedback: Sequence[Feedback] | None = None,
                            ranges: TruthRanges | None = None, polarity: str = "cost"
                            ) -> list[tuple[PanelDataset, TruthRecord]]:
    """Fresh truths and panels for each of ``n_datasets`` recovery replications."""
    alternatives = tuple(alternatives or route_choice_alternatives())
    feedback = tuple(feedback or route_choice_feedback())
    ranges = ranges or TruthRanges()
    out = []
    for i in range(n_datasets):
        rng = dataset_rng(seed, i)
        truth = sample_truth(alternatives, n_classes, len(template.covariate_names), ranges, rng)
        out.append(simulate_dataset(alternatives, template, feedback, truth, rng, polarity))
    return out
