"""Command-line entry points: fit, simulate, recover, compare, trajectory.

Exit codes: 0 success, 2 invalid configuration or data, 3 non-convergence
(or too many failed recovery fits). Diagnostics are written before exiting 3.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import io
from .evaluation import comparison_table, fit_statistics
from .inference import (FitError, canonicalize, fit, point_estimates, posterior_memberships_at_mean,
                        posterior_summary)
from .latent import mixture_loglik, write_memberships_csv
from .model import ClassParams, PanelDataset, count_parameters, fmt, validate
from .recovery import RecoveryStudy, run_recovery
from .rl import simulate_trajectory
from .simulate import (Feedback, FeedbackError, PanelTemplate, TruthRanges, TruthRecord,
                       dataset_rng, route_choice_feedback, route_choice_template, sample_truth,
                       simulate_dataset)
from .variational import NonFiniteError, VariationalModel

log = logging.getLogger("lcrl")

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3

SCHEDULES = {
    "constant_2": lambda T: [2.0] * T,
    "constant_7": lambda T: [7.0] * T,
    "cyclic": lambda T: [(2.0, 2.0, 7.0, 7.0, 7.0)[t % 5] for t in range(T)],
}

# Published estimates on the route-choice panel (reliable route fixed at 5,
# unreliable route's Q0 estimated); usable as trajectory presets.
PRESETS = {
    "route_choice_rl": [dict(gamma_ds=-0.799, gamma_sp_shift=0.299, beta_ds=0.419, beta_sp=1.00,
                       alpha=0.251, q0=6.69)],
    "route_choice_lcrl": [
        dict(gamma_ds=-0.635, gamma_sp_shift=3.70, beta_ds=0.935, beta_sp=0.781, alpha=0.277, q0=6.16),
        dict(gamma_ds=-1.49, gamma_sp_shift=0.390, beta_ds=0.337, beta_sp=0.837, alpha=0.355, q0=6.12),
        dict(gamma_ds=0.372, gamma_sp_shift=-0.684, beta_ds=0.247, beta_sp=0.141, alpha=0.437, q0=4.81),
    ],
}


class UsageError(Exception):
    """Invalid input detected by a command; mapped to exit code 2."""


def sample_dataset_path() -> Path:
    return Path(str(resources.files("lcrl") / "data" / "sample_panel.csv"))


def _dataset_path(cfg: io.RunConfig) -> Path:
    if cfg.dataset is None:
        raise UsageError("config field 'dataset' is required")
    if cfg.dataset == "sample":
        return sample_dataset_path()
    return cfg.resolve(cfg.dataset)


def _load_dataset(cfg: io.RunConfig) -> PanelDataset:
    path = _dataset_path(cfg)
    if not path.exists():
        raise UsageError(f"dataset {path} not found")
    return io.read_panel_csv(path, cfg.alternatives_tuple(), cfg.covariates, cfg.polarity)


def _echo_config(cfg: io.RunConfig, out: Path):
    raw = io.config_to_raw(cfg)
    if cfg.dataset not in (None, "sample"):
        raw["dataset"] = str(_dataset_path(cfg).resolve())
    raw["output"] = str(out)
    io.write_json(out / "effective_config.json", raw)


def _metadata(out: Path, command: str):
    from importlib.metadata import PackageNotFoundError, version
    try:
        ver = version("artifact")
    except PackageNotFoundError:
        ver = "unknown"
    io.write_json(out / "metadata.json", {
        "command": command, "version": ver,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")})


def _check(ds: PanelDataset, spec):
    problems = validate(ds, spec)
    if problems:
        raise UsageError("dataset failed validation:\n  " + "\n  ".join(problems))


def _fit_and_report(ds: PanelDataset, cfg: io.RunConfig, out: Path, n_classes: int | None = None):
    """Fit one model and write its artifacts into ``out``; returns (FitStats, converged)."""
    if n_classes is not None:
        cfg = io.RunConfig(**{**cfg.__dict__, "n_classes": n_classes})
    spec = cfg.model_spec(ds.covariate_names)
    _check(ds, spec)
    config = cfg.fit_config()
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = fit(ds, spec, config)
    except (FitError, NonFiniteError) as exc:
        diag = getattr(exc, "diagnostics", {"error": str(exc)})
        io.write_json(out / "diagnostics.json", {"error": str(exc), **diag})
        log.error("fit failed: %s", exc)
        return None, False
    state, perm = canonicalize(result.state)
    model = VariationalModel(ds, spec, config.eta_covariance)
    rows = posterior_summary(state, model, rng=np.random.default_rng([config.seed, 1]))
    params, eta = point_estimates(rows, model)
    ll = mixture_loglik(ds, params, eta, spec.reset_on_context_switch)
    stats = fit_statistics(ll, count_parameters(spec, ds), ds.n_observations)
    io.write_summary_csv(out / "summary.csv", rows)
    io.write_json(out / "fit_stats.json", {**stats.to_dict(), "K": spec.n_classes, "elbo": result.elbo})
    write_memberships_csv(out / "memberships.csv", ds,
                          posterior_memberships_at_mean(ds, spec, params, eta))
    io.write_json(out / "point_estimates.json",
                  io.point_estimates_dict(params, eta.eta, ds.covariate_names))
    diag = dict(result.diagnostics)
    diag["class_order"] = [int(p) + 1 for p in perm]
    io.write_json(out / "diagnostics.json", diag)
    return stats, bool(result.diagnostics["converged"])


def cmd_fit(cfg: io.RunConfig, out: Path, threads: int) -> int:
    ds = _load_dataset(cfg)
    stats, converged = _fit_and_report(ds, cfg, out)
    if stats is None:
        return EXIT_NOT_CONVERGED
    print(comparison_table([(f"K={cfg.n_classes}", stats)]))
    if not converged:
        print("optimizer did not meet the convergence criterion; see diagnostics.json", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_compare(cfg: io.RunConfig, out: Path, threads: int) -> int:
    ds = _load_dataset(cfg)
    ks = cfg.compare.get("K_values", [1, 2, 3])
    if not ks or any(not isinstance(k, int) or k < 1 for k in ks):
        raise UsageError(f"compare.K_values must be integers >= 1, got {ks!r}")
    table, status = [], EXIT_OK
    for k in ks:
        stats, converged = _fit_and_report(ds, cfg, out / f"K{k}", n_classes=k)
        if stats is None:
            status = EXIT_NOT_CONVERGED
            continue
        if not converged:
            status = EXIT_NOT_CONVERGED
        table.append((f"K={k}", stats))
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "n_params", "LL", "AIC", "BIC", "n_obs"])
        for label, s in table:
            w.writerow([label, s.n_params, fmt(s.loglik), fmt(s.aic), fmt(s.bic), s.n_obs])
    print(comparison_table(table))
    return status


def _simulate_inputs(cfg: io.RunConfig):
    block = cfg.simulate
    alts = cfg.alternatives_tuple()
    if "feedback" in block:
        try:
            feedback = tuple(Feedback.from_dict(d) for d in block["feedback"])
        except (FeedbackError, ValueError, AttributeError) as exc:
            raise UsageError(f"simulate.feedback: {exc}") from exc
    else:
        feedback = route_choice_feedback()
    ranges = TruthRanges.from_dict(block.get("ranges"))
    return alts, feedback, ranges


def _template(cfg: io.RunConfig, block: dict) -> PanelTemplate:
    if block.get("template") == "dataset":
        return PanelTemplate.from_dataset(_load_dataset(cfg))
    return route_choice_template(int(block.get("n_respondents", 83)),
                                 int(block.get("trials_per_context", 10)),
                                 int(block.get("template_seed", 20240)))


def cmd_simulate(cfg: io.RunConfig, out: Path, threads: int) -> int:
    block = cfg.simulate
    alts, feedback, ranges = _simulate_inputs(cfg)
    template = _template(cfg, block)
    seed = int(cfg.optimizer["seed"])
    rng = dataset_rng(seed, 0)
    if "truth" in block:
        truth = TruthRecord.from_dict(block["truth"])
        if truth.n_classes != cfg.n_classes:
            raise UsageError(f"simulate.truth has {truth.n_classes} classes but model.K is {cfg.n_classes}")
    else:
        truth = sample_truth(alts, cfg.n_classes, len(template.covariate_names), ranges, rng)
    try:
        ds, truth = simulate_dataset(alts, template, feedback, truth, rng, cfg.polarity,
                                     cfg.reset_on_context_switch)
    except FeedbackError as exc:
        raise UsageError(str(exc)) from exc
    problems = validate(ds, cfg.model_spec(ds.covariate_names), truth.params)
    if problems:
        raise UsageError("simulated panel failed validation:\n  " + "\n  ".join(problems))
    out.mkdir(parents=True, exist_ok=True)
    io.write_panel_csv(out / "panel.csv", ds)
    io.write_json(out / "truth.json", {**truth.to_dict(), "covariates": list(ds.covariate_names),
                                       "feedback": [f.to_dict() for f in feedback]})
    print(f"simulated {len(ds.respondents)} respondents, {ds.n_observations} choices -> {out / 'panel.csv'}")
    return EXIT_OK


def cmd_recover(cfg: io.RunConfig, out: Path, threads: int) -> int:
    block = cfg.recover
    alts, feedback, ranges = _simulate_inputs(
        io.RunConfig(**{**cfg.__dict__, "simulate": {**cfg.simulate, **block}}))
    n = int(block.get("n_datasets", 20))
    if n < 1:
        raise UsageError("recover.n_datasets must be >= 1")
    template = _template(cfg, block)
    study = RecoveryStudy(cfg.n_classes, n, template, cfg.fit_config(), int(cfg.optimizer["seed"]),
                          ranges, alts, feedback, cfg.prior_spec(), cfg.polarity)
    result = run_recovery(study, workers=max(int(threads), 1))
    out.mkdir(parents=True, exist_ok=True)
    result.report.to_csv(out / "recovery_report.csv")
    (out / "recovery_report.txt").write_text(result.report.pretty() + "\n")
    with open(out / "recovery_pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "parameter", "class", "truth", "estimate"])
        for o in result.outcomes:
            if o.error is not None:
                continue
            for (name, k), v in o.truth.items():
                w.writerow([o.index, name, "" if k is None else k, fmt(v), fmt(o.estimate[(name, k)])])
    io.write_json(out / "recovery_datasets.json", [
        {"dataset": o.index, "error": o.error,
         "permutation": None if o.permutation is None else [p + 1 for p in o.permutation],
         "separation": o.separation, "max_membership": o.max_membership}
        for o in result.outcomes])
    print(result.report.pretty())
    print(f"success rate {result.success_rate:.2f}")
    return EXIT_OK if result.success_rate >= 0.9 else EXIT_NOT_CONVERGED


def _trajectory_classes(cfg: io.RunConfig, alts) -> list[ClassParams]:
    block = cfg.trajectory
    sources = [k for k in ("preset", "point_estimates", "classes") if k in block]
    if len(sources) != 1:
        raise UsageError("trajectory needs exactly one of 'preset', 'point_estimates' or 'classes'")
    if "preset" in block:
        if block["preset"] not in PRESETS:
            raise UsageError(f"unknown trajectory preset {block['preset']!r}; "
                             f"choose from {sorted(PRESETS)}")
        return [ClassParams.build(alts, gamma_ds=[c["gamma_ds"]], gamma_sp_shift=[c["gamma_sp_shift"]],
                                  beta_ds=c["beta_ds"], beta_sp=c["beta_sp"], alpha=c["alpha"],
                                  q0=[c["q0"]])
                for c in PRESETS[block["preset"]]]
    if "point_estimates" in block:
        path = cfg.resolve(block["point_estimates"])
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read point estimates {path}: {exc}") from exc
        return TruthRecord.from_dict(raw).params
    return TruthRecord.from_dict({"classes": block["classes"]}).params


def cmd_trajectory(cfg: io.RunConfig, out: Path, threads: int) -> int:
    block = cfg.trajectory
    alts = cfg.alternatives_tuple()
    names = [a.name for a in alts]
    T = int(block.get("n_trials", 20))
    schedules = block.get("schedules", list(SCHEDULES))
    unknown = [s for s in schedules if s not in SCHEDULES]
    if unknown:
        raise UsageError(f"unknown schedule name(s) {unknown}; choose from {sorted(SCHEDULES)}")
    contexts = block.get("contexts", ["DS", "SP"])
    if any(c not in ("DS", "SP") for c in contexts):
        raise UsageError(f"trajectory.contexts must be DS and/or SP, got {contexts}")
    choice = block.get("choice", next((a.name for a in alts if a.q0_estimated), names[-1]))
    if choice not in names:
        raise UsageError(f"trajectory.choice {choice!r} is not an alternative")
    chosen = names.index(choice) + 1
    classes = _trajectory_classes(cfg, alts)
    for p in classes:
        if len(p.q0) != len(alts):
            raise UsageError("trajectory class parameters do not match the configured alternatives")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "schedule", "context", "trial", "alt", "q_value", "choice_prob"])
        for k, params in enumerate(classes, start=1):
            for sched in schedules:
                fb = SCHEDULES[sched](T)
                for ctx in contexts:
                    traj = simulate_trajectory(params, [ctx] * T, [chosen] * T, fb, cfg.polarity,
                                               cfg.reset_on_context_switch)
                    for t, c, alt, q, p in traj.rows(names):
                        w.writerow([k, sched, c, t, alt, fmt(q), fmt(p)])
    print(f"wrote {len(classes)} class(es) x {len(schedules)} schedule(s) x {len(contexts)} "
          f"context(s) -> {out / 'trajectories.csv'}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "recover": cmd_recover,
            "compare": cmd_compare, "trajectory": cmd_trajectory}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcrl", description="Latent class reinforcement-learning "
                                     "choice models fitted by variational Bayes.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration (defaults are used when omitted)")
    parser.add_argument("--seed", type=int, help="overrides optimizer.seed")
    parser.add_argument("--out", help="output directory (overrides the config's 'output')")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker processes for recovery batches")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = io.load_config(args.config) if args.config else io.config_from_dict({})
        if args.seed is not None:
            cfg.optimizer["seed"] = args.seed
        out = Path(args.out if args.out else cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, out)
        code = COMMANDS[args.command](cfg, out, args.threads)
        _metadata(out, args.command)
        return code
    except (UsageError, io.ConfigError, FeedbackError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TypeError, KeyError) as exc:
        print(f"error: invalid configuration: {exc!r}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
