"""Panel CSV reading/writing and JSON run configuration."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .inference import FitConfig
from .model import Alternative, ModelSpec, PanelDataset, PriorSpec, Respondent, Trial, fmt

BASE_COLUMNS = ("respondent_id", "trial_index", "context", "chosen_alt", "feedback")


class ConfigError(ValueError):
    """Configuration is missing a field or holds an invalid value."""


def write_panel_csv(path, dataset: PanelDataset):
    """One row per trial; the leading constant covariate is implicit and not written."""
    extra = list(dataset.covariate_names[1:])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(BASE_COLUMNS) + extra)
        for resp in dataset.respondents:
            cov = [fmt(v) for v in resp.covariates[1:]]
            for t in resp.trials:
                w.writerow([resp.id, t.index, t.context, t.chosen, fmt(t.feedback)] + cov)


def read_panel_csv(path, alternatives, covariates=None, polarity: str = "cost") -> PanelDataset:
    """Parse a panel CSV.

    ``covariates`` names the membership columns to use (a constant is always
    prepended); ``None`` takes every non-base column in header order. Rows may
    appear in any order; trials are sorted by index within each respondent.
    Covariates are read from each respondent's first row.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in BASE_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing columns {missing}")
        if covariates is None:
            covariates = [c for c in header if c not in BASE_COLUMNS]
        absent = [c for c in covariates if c not in header]
        if absent:
            raise ConfigError(f"{path}: covariate columns {absent} not in header")
        by_resp: dict[str, list] = {}
        first_cov: dict[str, tuple] = {}
        for row in reader:
            rid = row["respondent_id"]
            by_resp.setdefault(rid, []).append(
                Trial(int(row["trial_index"]), row["context"].strip(), int(row["chosen_alt"]),
                      float(row["feedback"])))
            if rid not in first_cov:
                first_cov[rid] = (1.0,) + tuple(float(row[c]) for c in covariates)
    respondents = tuple(
        Respondent(rid, first_cov[rid], tuple(sorted(trials, key=lambda t: t.index)))
        for rid, trials in by_resp.items())
    return PanelDataset(tuple(alternatives), respondents, polarity,
                        ("const",) + tuple(covariates))


def parse_alternatives(items: list, identified: str | None = None) -> tuple[Alternative, ...]:
    """Alternatives from config entries ``{"name": ..., "q0": {"fixed": v} | {"estimated": [a, b]}}``.

    The identified (zero-gamma) alternative defaults to the last one.
    """
    if not items or len(items) < 2:
        raise ConfigError("model.alternatives needs at least two entries")
    names = [it["name"] for it in items]
    identified = identified if identified is not None else names[-1]
    if identified not in names:
        raise ConfigError(f"model.identified_alternative {identified!r} is not an alternative")
    alts = []
    for it in items:
        q0 = it.get("q0")
        ident = it["name"] == identified
        if not isinstance(q0, dict) or len(q0) != 1:
            raise ConfigError(f"alternative {it['name']}: q0 must be {{'fixed': v}} or {{'estimated': [a, b]}}")
        if "fixed" in q0:
            alts.append(Alternative.fixed(it["name"], q0["fixed"], ident))
        elif "estimated" in q0:
            a, b = q0["estimated"]
            if not a < b:
                raise ConfigError(f"alternative {it['name']}: estimated q0 bounds need a < b")
            alts.append(Alternative.estimated(it["name"], a, b, ident))
        else:
            raise ConfigError(f"alternative {it['name']}: unknown q0 mode {list(q0)}")
    return tuple(alts)


DEFAULT_ALTERNATIVES = [
    {"name": "reliable", "q0": {"fixed": 5.0}},
    {"name": "unreliable", "q0": {"estimated": [2.0, 7.0]}},
]


@dataclass
class RunConfig:
    """Resolved configuration for every CLI command."""

    n_classes: int = 1
    alternatives: list = field(default_factory=lambda: [dict(a) for a in DEFAULT_ALTERNATIVES])
    identified_alternative: str | None = None
    covariates: list | None = None
    polarity: str = "cost"
    reset_on_context_switch: bool = False
    priors: dict = field(default_factory=lambda: asdict(PriorSpec()))
    optimizer: dict = field(default_factory=lambda: asdict(FitConfig()))
    dataset: str | None = None
    output: str = "out"
    simulate: dict = field(default_factory=dict)
    recover: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    base_dir: str = "."

    def alternatives_tuple(self) -> tuple[Alternative, ...]:
        return parse_alternatives(self.alternatives, self.identified_alternative)

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(**{k: tuple(v) for k, v in self.priors.items()})

    def fit_config(self) -> FitConfig:
        return FitConfig(**self.optimizer)

    def model_spec(self, covariate_names) -> ModelSpec:
        return ModelSpec(self.n_classes, tuple(covariate_names), self.prior_spec(),
                         int(self.optimizer.get("seed", 0)), self.reset_on_context_switch)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=str(path.parent))


def config_from_dict(raw: dict[str, Any], base_dir: str = ".") -> RunConfig:
    cfg = RunConfig(base_dir=base_dir)
    model = raw.get("model", {})
    known = {"K", "alternatives", "identified_alternative", "covariates", "polarity",
             "reset_on_context_switch", "priors"}
    unknown = set(model) - known
    if unknown:
        raise ConfigError(f"model: unknown fields {sorted(unknown)}")
    if "K" in model:
        cfg.n_classes = model["K"]
    if not isinstance(cfg.n_classes, int) or isinstance(cfg.n_classes, bool) or cfg.n_classes < 1:
        raise ConfigError(f"model.K must be an integer >= 1, got {cfg.n_classes!r}")
    cfg.alternatives = model.get("alternatives", cfg.alternatives)
    cfg.identified_alternative = model.get("identified_alternative")
    cfg.covariates = model.get("covariates")
    cfg.polarity = model.get("polarity", "cost")
    if cfg.polarity not in ("cost", "reward"):
        raise ConfigError(f"model.polarity must be 'cost' or 'reward', got {cfg.polarity!r}")
    cfg.reset_on_context_switch = bool(model.get("reset_on_context_switch", False))
    priors = {k: list(v) for k, v in cfg.priors.items()}
    for k, v in model.get("priors", {}).items():
        if k not in priors:
            raise ConfigError(f"model.priors: unknown prior {k!r}")
        if len(v) != 2 or not v[1] > 0:
            raise ConfigError(f"model.priors.{k} must be [mean, sd] with sd > 0")
        priors[k] = list(v)
    cfg.priors = priors
    opt = dict(cfg.optimizer)
    for k, v in raw.get("optimizer", {}).items():
        if k not in opt:
            raise ConfigError(f"optimizer: unknown setting {k!r}")
        opt[k] = v
    cfg.optimizer = opt
    cfg.dataset = raw.get("dataset")
    cfg.output = raw.get("output", cfg.output)
    for block in ("simulate", "recover", "compare", "trajectory"):
        setattr(cfg, block, dict(raw.get(block, {})))
    cfg.alternatives_tuple()  # validates
    return cfg


def config_to_raw(cfg: RunConfig) -> dict:
    """Inverse of :func:`config_from_dict` with every default filled in."""
    return {
        "model": {"K": cfg.n_classes, "alternatives": cfg.alternatives,
                  "identified_alternative": cfg.identified_alternative,
                  "covariates": cfg.covariates, "polarity": cfg.polarity,
                  "reset_on_context_switch": cfg.reset_on_context_switch,
                  "priors": cfg.priors},
        "optimizer": cfg.optimizer,
        "dataset": cfg.dataset,
        "output": cfg.output,
        "simulate": cfg.simulate,
        "recover": cfg.recover,
        "compare": cfg.compare,
        "trajectory": cfg.trajectory,
    }


# -- machine-readable outputs ---------------------------------------------

def _encode(obj, indent: int, level: int) -> str:
    pad, inner = " " * (indent * level), " " * (indent * (level + 1))
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return fmt(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _encode(v, indent, level + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj, indent: int = 2) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def write_summary_csv(path, rows):
    """Posterior summary: one row per (parameter, class)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "class", "mean", "sd", "z"])
        for r in rows:
            w.writerow([r.parameter, "" if r.cls is None else r.cls, fmt(r.mean), fmt(r.sd), fmt(r.z)])


def point_estimates_dict(params, eta, covariate_names) -> dict:
    """Posterior-mean parameters in the same layout as a simulation truth file."""
    return {
        "classes": [{"gamma_ds": list(p.gamma_ds), "gamma_sp_shift": list(p.gamma_sp_shift),
                     "beta_ds": p.beta_ds, "beta_sp": p.beta_sp, "alpha": p.alpha,
                     "q0": list(p.q0)} for p in params],
        "eta": np.asarray(eta).tolist(),
        "covariates": list(covariate_names),
    }
