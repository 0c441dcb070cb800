"""Core data model: panels of choices with feedback, and constrained parameters.

Everything here is immutable after construction. Numerical code elsewhere
works on the padded arrays produced by :meth:`PanelDataset.to_arrays`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

CONTEXTS = ("DS", "SP")
POLARITIES = ("cost", "reward")


@dataclass(frozen=True)
class Alternative:
    """One choice alternative.

    ``q0`` is either a fixed initial expectation (``q0_fixed``) or estimated
    on the open interval ``(q0_lower, q0_upper)`` through a scaled sigmoid.
    """

    name: str
    q0_fixed: float | None = None
    q0_lower: float | None = None
    q0_upper: float | None = None
    gamma_identified: bool = False

    @property
    def q0_estimated(self) -> bool:
        return self.q0_fixed is None

    @classmethod
    def fixed(cls, name: str, value: float, gamma_identified: bool = False) -> "Alternative":
        return cls(name, q0_fixed=float(value), gamma_identified=gamma_identified)

    @classmethod
    def estimated(cls, name: str, lower: float, upper: float,
                  gamma_identified: bool = False) -> "Alternative":
        return cls(name, q0_lower=float(lower), q0_upper=float(upper),
                   gamma_identified=gamma_identified)


@dataclass(frozen=True)
class Trial:
    index: int
    context: str
    chosen: int  # 1-based alternative id
    feedback: float


@dataclass(frozen=True)
class Respondent:
    id: str
    covariates: tuple[float, ...]  # leading constant included
    trials: tuple[Trial, ...]


@dataclass(frozen=True)
class PanelArrays:
    """Padded, 0-based array view of a dataset used by the numerical kernels."""

    choices: NDArray[np.int64]     # (N, T) 0-based, -1 on padding
    feedback: NDArray[np.float64]  # (N, T)
    is_sp: NDArray[np.bool_]       # (N, T)
    mask: NDArray[np.bool_]        # (N, T)
    switch: NDArray[np.bool_]      # (N, T) context differs from previous trial
    covariates: NDArray[np.float64]  # (N, D)

    @property
    def n_respondents(self) -> int:
        return self.choices.shape[0]

    @property
    def n_observations(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class PanelDataset:
    alternatives: tuple[Alternative, ...]
    respondents: tuple[Respondent, ...]
    outcome_polarity: str = "cost"
    covariate_names: tuple[str, ...] = ("const",)

    @property
    def n_alternatives(self) -> int:
        return len(self.alternatives)

    @property
    def n_observations(self) -> int:
        return sum(len(r.trials) for r in self.respondents)

    @property
    def polarity_sign(self) -> float:
        return -1.0 if self.outcome_polarity == "cost" else 1.0

    @property
    def identified_index(self) -> int:
        return next(i for i, a in enumerate(self.alternatives) if a.gamma_identified)

    def to_arrays(self) -> PanelArrays:
        n = len(self.respondents)
        t_max = max((len(r.trials) for r in self.respondents), default=0)
        d = len(self.covariate_names)
        choices = np.full((n, t_max), -1, dtype=np.int64)
        feedback = np.zeros((n, t_max))
        is_sp = np.zeros((n, t_max), dtype=bool)
        mask = np.zeros((n, t_max), dtype=bool)
        switch = np.zeros((n, t_max), dtype=bool)
        covariates = np.zeros((n, d))
        for i, resp in enumerate(self.respondents):
            covariates[i] = resp.covariates
            prev = None
            for t, trial in enumerate(resp.trials):
                choices[i, t] = trial.chosen - 1
                feedback[i, t] = trial.feedback
                is_sp[i, t] = trial.context == "SP"
                mask[i, t] = True
                switch[i, t] = prev is not None and trial.context != prev
                prev = trial.context
        return PanelArrays(choices, feedback, is_sp, mask, switch, covariates)


@dataclass(frozen=True)
class ClassParams:
    """RL parameters of one latent class in natural (constrained) space.

    Vectors run over all alternatives; identified gamma entries are zero and
    fixed q0 entries carry the alternative's fixed value.
    """

    gamma_ds: tuple[float, ...]
    gamma_sp_shift: tuple[float, ...]
    beta_ds: float
    beta_sp: float
    alpha: float
    q0: tuple[float, ...]

    @classmethod
    def build(cls, alternatives: Sequence[Alternative], *, gamma_ds, gamma_sp_shift,
              beta_ds: float, beta_sp: float, alpha: float, q0) -> "ClassParams":
        """Assemble from free entries only.

        ``gamma_ds``/``gamma_sp_shift`` list the non-identified alternatives in
        order; ``q0`` lists the estimated alternatives in order.
        """
        g_ds, g_sp, q = [], [], []
        free_g = iter(gamma_ds)
        free_s = iter(gamma_sp_shift)
        free_q = iter(q0)
        for alt in alternatives:
            if alt.gamma_identified:
                g_ds.append(0.0)
                g_sp.append(0.0)
            else:
                g_ds.append(float(next(free_g)))
                g_sp.append(float(next(free_s)))
            q.append(float(next(free_q)) if alt.q0_estimated else alt.q0_fixed)
        return cls(tuple(g_ds), tuple(g_sp), float(beta_ds), float(beta_sp),
                   float(alpha), tuple(q))

    def free_vector(self, alternatives: Sequence[Alternative]) -> NDArray[np.float64]:
        """Natural-space vector in the canonical free-parameter order.

        Order: free gamma_ds, free gamma_sp_shift, beta_ds, beta_sp, alpha,
        estimated q0 entries.
        """
        free = [i for i, a in enumerate(alternatives) if not a.gamma_identified]
        est = [i for i, a in enumerate(alternatives) if a.q0_estimated]
        return np.array([self.gamma_ds[i] for i in free]
                        + [self.gamma_sp_shift[i] for i in free]
                        + [self.beta_ds, self.beta_sp, self.alpha]
                        + [self.q0[i] for i in est])

    @classmethod
    def from_free_vector(cls, alternatives: Sequence[Alternative], vec) -> "ClassParams":
        n_free = sum(not a.gamma_identified for a in alternatives)
        vec = [float(v) for v in vec]
        return cls.build(alternatives,
                         gamma_ds=vec[:n_free],
                         gamma_sp_shift=vec[n_free:2 * n_free],
                         beta_ds=vec[2 * n_free],
                         beta_sp=vec[2 * n_free + 1],
                         alpha=vec[2 * n_free + 2],
                         q0=vec[2 * n_free + 3:])


def free_parameter_names(alternatives: Sequence[Alternative]) -> list[str]:
    """Names matching the order of :meth:`ClassParams.free_vector`."""
    names = [f"gamma_ds[{a.name}]" for a in alternatives if not a.gamma_identified]
    names += [f"gamma_sp[{a.name}]" for a in alternatives if not a.gamma_identified]
    names += ["beta_ds", "beta_sp", "alpha"]
    names += [f"q0[{a.name}]" for a in alternatives if a.q0_estimated]
    return names


@dataclass(frozen=True)
class MembershipParams:
    """Class-membership coefficients; the last class is the zero reference."""

    eta: NDArray[np.float64]  # (K-1, D)

    @property
    def n_classes(self) -> int:
        return self.eta.shape[0] + 1

    def full(self) -> NDArray[np.float64]:
        """(K, D) matrix with the zero reference row appended."""
        return np.vstack([self.eta, np.zeros((1, self.eta.shape[1]))])

    @classmethod
    def zeros(cls, n_classes: int, n_covariates: int) -> "MembershipParams":
        return cls(np.zeros((n_classes - 1, n_covariates)))


@dataclass(frozen=True)
class PriorSpec:
    """Prior hyperparameters, one (mean, sd) pair per latent group.

    ``log_beta`` holds the lognormal (meanlog, sdlog) of each sensitivity.
    """

    gamma: tuple[float, float] = (0.0, 5.0)
    eta: tuple[float, float] = (0.0, 5.0)
    z_alpha: tuple[float, float] = (0.0, 1.5)
    z_q0: tuple[float, float] = (0.0, 1.5)
    log_beta: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for name in ("gamma", "eta", "z_alpha", "z_q0", "log_beta"):
            if not getattr(self, name)[1] > 0:
                raise ValueError(f"prior sd for {name} must be positive")


@dataclass(frozen=True)
class ModelSpec:
    n_classes: int = 1
    membership_covariate_names: tuple[str, ...] = ("const",)
    priors: PriorSpec = field(default_factory=PriorSpec)
    rng_seed: int = 0
    reset_on_context_switch: bool = False

    @property
    def n_covariates(self) -> int:
        return len(self.membership_covariate_names)


def validate(dataset: PanelDataset, spec: ModelSpec | None = None,
             params: Sequence[ClassParams] = ()) -> list[str]:
    """Collect every invariant violation; an empty list means the inputs are usable."""
    problems: list[str] = []
    alts = dataset.alternatives
    n_alt = len(alts)
    if n_alt < 2:
        problems.append("dataset needs at least two alternatives")
    n_ident = sum(a.gamma_identified for a in alts)
    if n_ident != 1:
        problems.append(f"exactly one alternative must have gamma identified, found {n_ident}")
    for a in alts:
        if a.q0_fixed is None:
            if a.q0_lower is None or a.q0_upper is None:
                problems.append(f"alternative {a.name}: estimated q0 needs bounds")
            elif not a.q0_lower < a.q0_upper:
                problems.append(f"alternative {a.name}: q0 bounds need lower < upper")
        elif not math.isfinite(a.q0_fixed):
            problems.append(f"alternative {a.name}: fixed q0 not finite")
    if dataset.outcome_polarity not in POLARITIES:
        problems.append(f"outcome_polarity {dataset.outcome_polarity!r} not in {POLARITIES}")
    if not dataset.respondents:
        problems.append("dataset has no respondents")
    if spec is not None:
        if spec.n_classes < 1:
            problems.append(f"K (n_classes) must be >= 1, got {spec.n_classes}")
        if tuple(spec.membership_covariate_names) != tuple(dataset.covariate_names):
            problems.append("membership covariates "
                            f"{list(spec.membership_covariate_names)} do not match dataset "
                            f"covariates {list(dataset.covariate_names)}")
    n_cov = len(dataset.covariate_names)
    seen = set()
    for resp in dataset.respondents:
        if resp.id in seen:
            problems.append(f"respondent {resp.id}: duplicate id")
        seen.add(resp.id)
        if len(resp.covariates) != n_cov:
            problems.append(f"respondent {resp.id}: covariate vector has length "
                            f"{len(resp.covariates)}, expected {n_cov}")
        elif not all(math.isfinite(x) for x in resp.covariates):
            problems.append(f"respondent {resp.id}: non-finite covariate")
        if not resp.trials:
            problems.append(f"respondent {resp.id}: no trials")
        for pos, trial in enumerate(resp.trials, start=1):
            where = f"respondent {resp.id} trial {trial.index}"
            if trial.index != pos:
                problems.append(f"{where}: gap in trial order (expected index {pos})")
            if trial.context not in CONTEXTS:
                problems.append(f"{where}: unrecognized context {trial.context!r}")
            if not 1 <= trial.chosen <= n_alt:
                problems.append(f"{where}: chosen alternative {trial.chosen} out of range")
            if not math.isfinite(trial.feedback):
                problems.append(f"{where}: feedback not finite")
    for k, p in enumerate(params, start=1):
        problems.extend(f"class {k}: {msg}" for msg in _check_class_params(p, alts))
    return problems


def _check_class_params(p: ClassParams, alts: Sequence[Alternative]) -> list[str]:
    out = []
    if not p.beta_ds > 0:
        out.append(f"beta_ds {p.beta_ds} not positive")
    if not p.beta_sp > 0:
        out.append(f"beta_sp {p.beta_sp} not positive")
    if not 0.0 <= p.alpha <= 1.0:
        out.append(f"alpha {p.alpha} out of [0,1]")
    if not (len(p.gamma_ds) == len(p.gamma_sp_shift) == len(p.q0) == len(alts)):
        out.append("parameter vectors do not match the alternative count")
        return out
    for i, a in enumerate(alts):
        if a.gamma_identified and (p.gamma_ds[i] != 0.0 or p.gamma_sp_shift[i] != 0.0):
            out.append(f"identified gamma of {a.name} is not zero")
        if a.q0_estimated and a.q0_lower is not None and a.q0_upper is not None:
            if not a.q0_lower <= p.q0[i] <= a.q0_upper:
                out.append(f"q0 of {a.name} = {p.q0[i]} outside [{a.q0_lower}, {a.q0_upper}]")
        elif not a.q0_estimated and p.q0[i] != a.q0_fixed:
            out.append(f"q0 of {a.name} differs from its fixed value")
    return out


def n_class_parameters(alternatives: Sequence[Alternative]) -> int:
    n_free = sum(not a.gamma_identified for a in alternatives)
    n_est = sum(a.q0_estimated for a in alternatives)
    return 2 * n_free + 3 + n_est


def count_parameters(spec: ModelSpec, dataset: PanelDataset) -> int:
    """Point-parameter count used for AIC/BIC."""
    k = spec.n_classes
    return k * n_class_parameters(dataset.alternatives) + (k - 1) * spec.n_covariates


def fmt(x) -> str:
    """17-significant-digit text for machine-readable outputs."""
    return format(float(x), ".17g")


def route_choice_alternatives() -> tuple[Alternative, ...]:
    """Reliable route fixed at 5, unreliable route estimated on [2, 7]."""
    return (Alternative.fixed("reliable", 5.0),
            Alternative.estimated("unreliable", 2.0, 7.0, gamma_identified=True))
