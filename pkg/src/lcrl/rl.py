"""Rescorla-Wagner expectations and softmax choice, one respondent at a time.

These functions are the readable reference path. The batched kernel in
:mod:`lcrl.kernel` computes the same quantities for many respondents and
parameter draws at once and is checked against this module.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .model import ClassParams, Respondent, fmt


@dataclass(frozen=True)
class QState:
    q: tuple[float, ...]
    trial_cursor: int = 0


@dataclass(frozen=True)
class QTrajectory:
    """Pre-update expectations and choice probabilities for every trial."""

    contexts: tuple[str, ...]
    q_before: NDArray[np.float64]  # (T, I)
    probs: NDArray[np.float64]     # (T, I)
    q_final: NDArray[np.float64]   # (I,)
    final_probs: NDArray[np.float64]  # (I,) next-choice probabilities

    def expectations(self) -> NDArray[np.float64]:
        """(T+1, I): row t holds the expectations after t updates."""
        return np.vstack([self.q_before, self.q_final[None, :]])

    def probabilities(self) -> NDArray[np.float64]:
        return np.vstack([self.probs, self.final_probs[None, :]])

    def rows(self, alt_names: Sequence[str] | None = None):
        """Long-format rows ``(trial, context, alt, q_value, choice_prob)``.

        ``trial`` counts completed updates, so row 0 carries the initial
        expectations and row T the state after the last feedback.
        """
        q = self.expectations()
        p = self.probabilities()
        contexts = self.contexts + (self.contexts[-1],) if self.contexts else ("DS",)
        names = alt_names or [str(i + 1) for i in range(q.shape[1])]
        for t in range(q.shape[0]):
            for i, name in enumerate(names):
                yield t, contexts[t], name, float(q[t, i]), float(p[t, i])


def update_expectation(state: QState, chosen: int, feedback: float, alpha: float) -> QState:
    """Move the chosen alternative's expectation toward the feedback.

    ``chosen`` is a 1-based alternative id; every other entry is copied as is.
    """
    if not 1 <= chosen <= len(state.q):
        raise ValueError(f"chosen alternative {chosen} not in 1..{len(state.q)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    q = list(state.q)
    j = chosen - 1
    q[j] = q[j] + alpha * (feedback - q[j])
    return QState(tuple(q), state.trial_cursor + 1)


def utilities(state: QState, params: ClassParams, context: str, polarity: str) -> NDArray[np.float64]:
    sign = -1.0 if polarity == "cost" else 1.0
    gamma = np.asarray(params.gamma_ds, dtype=float)
    if context == "SP":
        gamma = gamma + np.asarray(params.gamma_sp_shift, dtype=float)
        beta = params.beta_sp
    elif context == "DS":
        beta = params.beta_ds
    else:
        raise ValueError(f"unknown context {context!r}")
    return gamma + sign * beta * np.asarray(state.q, dtype=float)


def softmax(u: NDArray[np.float64]) -> NDArray[np.float64]:
    z = np.exp(u - np.max(u))
    return z / z.sum()


def choice_probabilities(state: QState, params: ClassParams, context: str,
                         polarity: str = "cost") -> NDArray[np.float64]:
    return softmax(utilities(state, params, context, polarity))


def sequence_loglik(respondent: Respondent, params: ClassParams, polarity: str = "cost",
                    reset_on_context_switch: bool = False) -> tuple[float, QTrajectory]:
    """Log-probability of a respondent's full choice sequence under one class."""
    contexts = tuple(t.context for t in respondent.trials)
    return _run(params, contexts, [t.chosen for t in respondent.trials],
                [t.feedback for t in respondent.trials], polarity, reset_on_context_switch)


def simulate_trajectory(params: ClassParams, contexts: Sequence[str], choices: Sequence[int],
                        feedback: Sequence[float], polarity: str = "cost",
                        reset_on_context_switch: bool = False) -> QTrajectory:
    """Expectation/probability path under a supplied (forced) choice sequence."""
    if not len(contexts) == len(choices) == len(feedback):
        raise ValueError("context, choice and feedback schedules must have equal length")
    return _run(params, tuple(contexts), list(choices), list(feedback), polarity,
                reset_on_context_switch)[1]


def _run(params, contexts, choices, feedback, polarity, reset):
    state = QState(tuple(params.q0))
    n_alt = len(params.q0)
    q_before = np.empty((len(contexts), n_alt))
    probs = np.empty((len(contexts), n_alt))
    loglik = 0.0
    prev = None
    for t, (ctx, y, r) in enumerate(zip(contexts, choices, feedback)):
        if reset and prev is not None and ctx != prev:
            state = QState(tuple(params.q0), state.trial_cursor)
        prev = ctx
        p = choice_probabilities(state, params, ctx, polarity)
        q_before[t] = state.q
        probs[t] = p
        u = utilities(state, params, ctx, polarity)
        m = u.max()
        loglik += u[y - 1] - (m + np.log(np.exp(u - m).sum()))
        state = update_expectation(state, y, r, params.alpha)
    last = contexts[-1] if contexts else "DS"
    final_probs = choice_probabilities(state, params, last, polarity)
    traj = QTrajectory(tuple(contexts), q_before, probs, np.asarray(state.q, dtype=float),
                       final_probs)
    return float(loglik), traj


def write_trajectory_csv(path, trajectory: QTrajectory, alt_names: Sequence[str] | None = None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "context", "alt", "q_value", "choice_prob"])
        for t, ctx, alt, q, p in trajectory.rows(alt_names):
            w.writerow([t, ctx, alt, fmt(q), fmt(p)])
