"""Experiment orchestration: JSON configs, subcommands, CSV/JSON emission.

A JSON experiment config fully determines every output file; re-running a
command with the same config reproduces the files byte for byte. Floats are
written with the %.17g format (round-trip exact), file writes happen only in
the orchestrator after runs complete, and the worker count never affects
results, only wall time.

Exit-code contract for :func:`run_cli`: 0 success, 2 configuration error,
3 numerical or divergence error.
"""

import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .dynamics import TrainConfig, loo_train, run_ensemble, train_run
from .errors import CapabilityError, ConfigError, GradnoiseError
from .gradstats import minibatch_factor
from .linalg import (
    STATIONARY_MODES,
    SpdMatrix,
    solve_stationary_covariance,
    stationary_residual,
)
from .problems import (
    LogisticSpec,
    MlpSpec,
    QuadraticSpec,
    build_problem,
    generate_dataset,
    population_oracle_sample,
)

TRAJECTORY_CSV_HEADER = ("step", "train_loss", "test_loss", "grad_norm_sq",
                         "trace_c", "dist_init", "lambda1", "gap")

TRAJ_BOUNDS = ("traj-isotropic", "traj-langevin", "traj-anisotropic",
               "traj-data-dependent", "terminal-gradient-accum")
TERMINAL_BOUNDS = ("terminal-general", "terminal-anisotropic",
                   "terminal-isotropic", "terminal-loo", "fim-takeuchi")
SWEEP_BOUNDS = ("terminal-general", "terminal-anisotropic",
                "terminal-isotropic", "fim-takeuchi")

_TOP_KEYS = {"problem", "train", "bounds", "ensemble", "sweep_n", "seed",
             "oracle_seed", "out_dir", "g_tilde", "R", "M", "reference",
             "compare_seeds", "stationary"}
_PROBLEM_KEYS = {
    "quadratic": {"family", "dim", "curvature", "center", "scatter",
                  "pop_oracle_size"},
    "logistic": {"family", "dim", "mean0", "mean1", "separation", "cov",
                 "balance", "l2", "pop_oracle_size"},
    "mlp": {"family", "in_dim", "hidden", "classes", "teacher_seed",
            "teacher_scale", "pop_oracle_size"},
}
_TRAIN_KEYS = {"n", "b", "lr", "lr_schedule", "steps", "mode", "log_every",
               "record_weights", "burn_in", "init_scale", "w0", "cov_refresh",
               "dataset_seed", "tail_checkpoints", "tail_spacing",
               "log_lambda1", "log_alignment"}
_ENSEMBLE_KEYS = {"dataset_seeds", "run_seeds"}
_STATIONARY_KEYS = {"modes", "b"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; see the README for the JSON schema."""

    spec: object
    train: TrainConfig
    bound_names: tuple
    dataset_seeds: int
    run_seeds: int
    sweep_n: tuple
    seed: int
    oracle_seed: int
    out_dir: str
    g_tilde: str
    R: float
    M: float
    reference: str
    compare_seeds: int
    stationary: dict


def _check_keys(section, given, allowed, unknown):
    for key in given:
        if key not in allowed:
            unknown.append(f"{section}.{key}" if section else key)


def _parse_problem(cfg, unknown):
    family = cfg.get("family")
    if family not in _PROBLEM_KEYS:
        raise ConfigError(
            f"problem.family must be one of {sorted(_PROBLEM_KEYS)}, got {family!r}")
    _check_keys("problem", cfg, _PROBLEM_KEYS[family], unknown)
    if unknown:
        return None
    if family == "quadratic":
        dim = int(cfg.get("dim", 1))
        center = cfg.get("center", 0.0)
        center = np.full(dim, float(center)) if np.isscalar(center) else center
        return QuadraticSpec(
            curvature=cfg.get("curvature", 1.0),
            center=center,
            scatter=cfg.get("scatter", 1.0),
            pop_oracle_size=int(cfg.get("pop_oracle_size", 10_000)),
        )
    if family == "logistic":
        dim = int(cfg["dim"])
        if "mean0" in cfg or "mean1" in cfg:
            mean0, mean1 = cfg["mean0"], cfg["mean1"]
        else:
            half = 0.5 * float(cfg.get("separation", 2.0)) / np.sqrt(dim)
            mean1 = np.full(dim, half)
            mean0 = -mean1
        return LogisticSpec(
            dim=dim, mean0=mean0, mean1=mean1, cov=cfg.get("cov", 1.0),
            balance=float(cfg.get("balance", 0.5)),
            l2=float(cfg.get("l2", 0.0)),
            pop_oracle_size=int(cfg.get("pop_oracle_size", 10_000)),
        )
    return MlpSpec(
        in_dim=int(cfg["in_dim"]), hidden=int(cfg["hidden"]),
        classes=int(cfg["classes"]),
        teacher_seed=int(cfg.get("teacher_seed", 0)),
        teacher_scale=float(cfg.get("teacher_scale", 1.0)),
        pop_oracle_size=int(cfg.get("pop_oracle_size", 10_000)),
    )


def _parse_schedule(train):
    has_lr = "lr" in train
    has_sched = "lr_schedule" in train
    if has_lr == has_sched:
        raise ConfigError("train config needs exactly one of lr, lr_schedule")
    if has_lr:
        return ((1, float(train["lr"])),)
    return tuple((int(s), float(e)) for s, e in train["lr_schedule"])


def load_experiment_config(source, seed_override=None, out_override=None):
    """Parse and validate a config from a JSON path or an in-memory dict.

    Every unknown key anywhere in the document is collected and reported in
    one ConfigError, so a typo'd config fails loudly and completely.
    """
    if isinstance(source, (str, Path)):
        with open(source) as f:
            raw = json.load(f)
    else:
        raw = dict(source)
    unknown = []
    _check_keys("", raw, _TOP_KEYS, unknown)
    if "problem" not in raw or "train" not in raw:
        raise ConfigError("config must contain 'problem' and 'train' sections")
    train_raw = dict(raw["train"])
    _check_keys("train", train_raw, _TRAIN_KEYS, unknown)
    ensemble = dict(raw.get("ensemble", {}))
    _check_keys("ensemble", ensemble, _ENSEMBLE_KEYS, unknown)
    stationary = dict(raw.get("stationary", {}))
    _check_keys("stationary", stationary, _STATIONARY_KEYS, unknown)
    spec = _parse_problem(dict(raw["problem"]), unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))

    seed = int(seed_override if seed_override is not None else raw.get("seed", 0))
    oracle_seed = int(raw.get("oracle_seed", 0))
    w0 = train_raw.get("w0")
    train = TrainConfig(
        spec=spec,
        n=int(train_raw["n"]),
        b=int(train_raw["b"]),
        lr_schedule=_parse_schedule(train_raw),
        steps=int(train_raw["steps"]),
        mode=train_raw.get("mode", "sgd"),
        seed=seed,
        dataset_seed=(int(train_raw["dataset_seed"])
                      if "dataset_seed" in train_raw else None),
        oracle_seed=oracle_seed,
        log_every=int(train_raw.get("log_every", 1)),
        record_weights=bool(train_raw.get("record_weights", False)),
        burn_in=int(train_raw.get("burn_in", 0)),
        w0=None if w0 is None else np.asarray(w0, dtype=float),
        init_scale=float(train_raw.get("init_scale", 1.0)),
        cov_refresh=int(train_raw.get("cov_refresh", 1)),
        tail_checkpoints=int(train_raw.get("tail_checkpoints", 0)),
        tail_spacing=int(train_raw.get("tail_spacing", 1)),
        log_lambda1=bool(train_raw.get("log_lambda1", False)),
        log_alignment=bool(train_raw.get("log_alignment", False)),
    )
    bound_names = tuple(raw.get("bounds", []))
    known = set(TRAJ_BOUNDS) | set(TERMINAL_BOUNDS)
    bad = [b for b in bound_names if b not in known]
    if bad:
        raise ConfigError("unknown bound names: " + ", ".join(sorted(bad)))
    g_tilde = raw.get("g_tilde", "population-gradient")
    if g_tilde not in ("zero", "population-gradient"):
        raise ConfigError(f"g_tilde must be zero or population-gradient, got {g_tilde!r}")
    reference = raw.get("reference", "grand-mean")
    if reference not in ("grand-mean", "init"):
        raise ConfigError(f"reference must be grand-mean or init, got {reference!r}")
    return ExperimentConfig(
        spec=spec,
        train=train,
        bound_names=bound_names,
        dataset_seeds=int(ensemble.get("dataset_seeds", 2)),
        run_seeds=int(ensemble.get("run_seeds", 2)),
        sweep_n=tuple(int(x) for x in raw.get("sweep_n", [])),
        seed=seed,
        oracle_seed=oracle_seed,
        out_dir=str(out_override if out_override is not None
                    else raw.get("out_dir", ".")),
        g_tilde=g_tilde,
        R=float(raw.get("R", 1.0)),
        M=float(raw.get("M", 1.0)),
        reference=reference,
        compare_seeds=int(raw.get("compare_seeds", 10)),
        stationary=stationary,
    )


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _trajectory_rows(record):
    k = len(record.steps)
    nan = float("nan")
    lam = record.lambda1 if record.lambda1 is not None else [nan] * k
    gap = record.gap if record.gap is not None else [nan] * k
    for i in range(k):
        yield (int(record.steps[i]), record.train_loss[i], record.test_loss[i],
               record.grad_norm_sq[i], record.trace_c[i], record.dist_init[i],
               lam[i], gap[i])


def estimate_generalization_error(runs):
    """Mean over runs of (oracle-sample loss - training loss) at W_T."""
    if hasattr(runs, "runs"):
        runs = runs.runs
    if not runs:
        raise ConfigError("no runs supplied")
    gaps = [r.final_test_loss - r.final_train_loss for r in runs]
    return float(np.mean(gaps))


def cmd_train(config, out_dir=None, jobs=None):
    """Run one training process, write trajectory.csv (+ weights.json)."""
    record = train_run(config.train)
    payload = {
        "diverged": record.diverged,
        "diverged_step": record.diverged_step,
        "final_train_loss": float(record.train_loss[-1]) if len(record.train_loss) else None,
        "rows": len(record.steps),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "trajectory.csv", TRAJECTORY_CSV_HEADER,
                   _trajectory_rows(record))
        if record.weights is not None:
            _write_json(out / "weights.json", {
                "steps": [int(s) for s in record.steps],
                "weights": [[float(x) for x in w] for w in record.weights],
                "w0": [float(x) for x in record.w0],
                "final_w": [float(x) for x in record.final_w],
            })
    return payload, record


def _mean_curves(records):
    length = min(len(r.steps) for r in records)
    rows = []
    for i in range(length):
        rows.append((
            int(records[0].steps[i]),
            float(np.mean([r.train_loss[i] for r in records])),
            float(np.mean([r.test_loss[i] for r in records])),
            float(np.mean([r.grad_norm_sq[i] for r in records])),
            float(np.mean([r.trace_c[i] for r in records])),
            float(np.mean([r.dist_init[i] for r in records])),
            float("nan"), float("nan"),
        ))
    return rows


def cmd_compare(config, out_dir=None, jobs=None):
    """Paired SGD vs SDE runs; seed-averaged curves and terminal agreement."""
    problem = build_problem(config.spec)
    oracle = population_oracle_sample(config.spec, config.oracle_seed)
    recs = {"sgd": [], "sde": []}
    for j in range(config.compare_seeds):
        for mode in ("sgd", "sde"):
            cfg = replace(config.train, mode=mode, seed=config.seed + j,
                          dataset_seed=config.seed + j)
            recs[mode].append(train_run(cfg, oracle=oracle))
    summary = {
        "n_seeds": config.compare_seeds,
        "diverged_runs": sum(r.diverged for rs in recs.values() for r in rs),
    }
    for mode in ("sgd", "sde"):
        summary[f"terminal_test_loss_{mode}"] = float(
            np.mean([r.test_loss[-1] for r in recs[mode]]))
    summary["test_loss_abs_diff"] = abs(
        summary["terminal_test_loss_sgd"] - summary["terminal_test_loss_sde"])
    if problem.has_accuracy:
        for mode in ("sgd", "sde"):
            accs = [problem.accuracy(r.final_w, oracle.features, oracle.labels)
                    for r in recs[mode]]
            summary[f"terminal_accuracy_{mode}"] = float(np.mean(accs))
        summary["accuracy_abs_diff"] = abs(
            summary["terminal_accuracy_sgd"] - summary["terminal_accuracy_sde"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for mode in ("sgd", "sde"):
            _write_csv(out / f"compare_{mode}.csv", TRAJECTORY_CSV_HEADER,
                       _mean_curves(recs[mode]))
        _write_json(out / "compare_summary.json", summary)
    return summary


def _bounds_outputs(reports, out_dir):
    rows = []
    for rep in reports:
        rows.append((
            rep.name, rep.value, rep.core, rep.n_runs_used,
            "|".join(rep.flags),
            _fmt(rep.config.get("R")) if rep.config.get("R") is not None else "",
            _fmt(rep.config.get("M")) if rep.config.get("M") is not None else "",
            rep.config.get("n"), rep.config.get("b"),
            rep.config.get("eta"), rep.config.get("T"),
        ))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "bounds.json",
                    [bounds_mod.report_to_json_dict(r) for r in reports])
        _write_csv(out / "bounds.csv",
                   ("name", "value", "core", "n_runs_used", "flags",
                    "R", "M", "n", "b", "eta", "T"), rows)


def _trajectory_records(config):
    records = []
    base = config.train.effective_dataset_seed
    for i in range(config.dataset_seeds):
        for j in range(config.run_seeds):
            cfg = replace(config.train, record_weights=True,
                          dataset_seed=base + i, seed=config.seed + j)
            records.append(train_run(cfg))
    return records


def cmd_bounds_traj(config, out_dir=None, jobs=None):
    """Evaluate trajectory-based bounds on freshly trained runs."""
    names = [n for n in (config.bound_names or TRAJ_BOUNDS) if n in TRAJ_BOUNDS]
    if not names:
        raise ConfigError("no trajectory bounds selected")
    records = _trajectory_records(config)
    g_choice = bounds_mod.GTildeChoice(kind=config.g_tilde)
    need_pop = "traj-anisotropic" in names or config.g_tilde == "population-gradient"
    tape = None
    if {"traj-isotropic", "traj-langevin", "traj-anisotropic"} & set(names):
        tape = bounds_mod.tape_from_records(records, population=need_pop)
    reports = []
    for name in names:
        if name == "traj-isotropic":
            reports.append(bounds_mod.traj_bound_isotropic(
                tape, g_choice, R=config.R))
        elif name == "traj-langevin":
            reports.append(bounds_mod.traj_bound_langevin(
                tape, g_choice, R=config.R))
        elif name == "traj-anisotropic":
            reports.append(bounds_mod.traj_bound_anisotropic(tape, R=config.R))
        elif name == "traj-data-dependent":
            reports.append(bounds_mod.traj_bound_data_dependent(
                records, M=config.M, seed=config.seed))
        elif name == "terminal-gradient-accum":
            reports.append(bounds_mod.terminal_bound_gradient_accum(
                records, R=config.R))
    _bounds_outputs(reports, out_dir)
    return reports


def _loo_pairs(config):
    pairs = []
    base = config.train.effective_dataset_seed
    n = config.train.n
    for i in range(config.dataset_seeds):
        ds_seed = base + i
        dataset = generate_dataset(config.spec, ds_seed, n)
        drop = ds_seed % n
        subset = [k for k in range(n) if k != drop]
        for j in range(config.run_seeds):
            cfg = replace(config.train, dataset_seed=ds_seed,
                          seed=config.seed + j)
            full = train_run(cfg, dataset=dataset)
            loo = loo_train(cfg, dataset, subset)
            pairs.append((full, loo))
    return pairs


def cmd_bounds_terminal(config, out_dir=None, jobs=None):
    """Evaluate terminal-state bounds on a fresh ensemble."""
    names = [n for n in (config.bound_names or TERMINAL_BOUNDS)
             if n in TERMINAL_BOUNDS]
    if not names:
        raise ConfigError("no terminal bounds selected")
    ensemble = None
    if set(names) - {"terminal-loo"}:
        ensemble = run_ensemble(config.train, config.dataset_seeds,
                                config.run_seeds, jobs=jobs or 1)
    reports = []
    for name in names:
        if name == "terminal-general":
            reports.append(bounds_mod.terminal_bound_general(ensemble, R=config.R))
        elif name == "terminal-anisotropic":
            reports.append(bounds_mod.terminal_bound_anisotropic(
                ensemble, R=config.R))
        elif name == "terminal-isotropic":
            reports.append(bounds_mod.terminal_bound_isotropic(
                ensemble, reference=config.reference, R=config.R))
        elif name == "terminal-loo":
            reports.append(bounds_mod.terminal_bound_loo(
                _loo_pairs(config), M=config.M))
        elif name == "fim-takeuchi":
            reports.append(bounds_mod.fim_takeuchi_bound(ensemble, M=config.M))
    _bounds_outputs(reports, out_dir)
    if ensemble is not None:
        gen = estimate_generalization_error(ensemble)
        for rep in reports:
            rep.components.setdefault("generalization_error_estimate", gen)
    return reports


def cmd_stationary(config, out_dir=None, jobs=None):
    """Solve the stationary covariance and check it against a long SDE tail."""
    if not isinstance(config.spec, QuadraticSpec):
        raise CapabilityError(
            "the stationary command needs the quadratic family (analytic Hessian)")
    train = config.train
    if train.tail_checkpoints == 0:
        d = config.spec.dim
        train = replace(train, tail_checkpoints=max(4 * d, 8), tail_spacing=d)
    if train.mode != "sde":
        train = replace(train, mode="sde")
    record = train_run(train)
    if record.diverged:
        raise GradnoiseError(
            f"stationary run diverged at step {record.diverged_step}")
    problem = build_problem(config.spec)
    dataset = generate_dataset(config.spec, train.effective_dataset_seed, train.n)
    tail = record.tail_weights
    tail_mean = tail.mean(axis=0)
    centered = tail - tail_mean
    empirical = centered.T @ centered / max(tail.shape[0] - 1, 1)
    grads = problem.per_example_grads(tail_mean, dataset.features, dataset.labels)
    gmean = grads.mean(axis=0)
    sigma = grads.T @ grads / train.n - np.outer(gmean, gmean)
    c = minibatch_factor(train.n, train.b) * (sigma + sigma.T) / 2.0
    h = problem.exact_hessian(tail_mean, dataset.features, dataset.labels)
    eta = train.lr_at(train.steps)
    modes = config.stationary.get("modes", list(STATIONARY_MODES))
    result = {"eta": eta, "modes": {}, "empirical": {
        "lambda": [[float(x) for x in row] for row in empirical],
        "tail_samples": int(tail.shape[0]),
    }}
    b_small = int(config.stationary.get("b", train.b))
    for mode in modes:
        lam = solve_stationary_covariance(h, c, eta, mode=mode, b=b_small)
        entry = {
            "lambda": [[float(x) for x in row] for row in lam],
            "residual": stationary_residual(lam, h, c, eta),
        }
        if mode == "general":
            denom = float(np.linalg.norm(lam))
            entry["empirical_rel_frobenius_error"] = (
                float(np.linalg.norm(empirical - lam)) / denom if denom else None)
        result["modes"][mode] = entry
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "stationary.json", result)
    return result


def cmd_sweep_n(config, out_dir=None, jobs=None):
    """Sweep the dataset size; one row per (n, bound) plus the measured gap."""
    if not config.sweep_n:
        raise ConfigError("sweep-n needs a nonempty sweep_n list")
    names = [b for b in (config.bound_names or SWEEP_BOUNDS)]
    bad = [b for b in names if b not in SWEEP_BOUNDS]
    if bad:
        raise ConfigError(
            "sweep-n supports ensemble bounds only; unsupported: "
            + ", ".join(sorted(bad)))
    rows = []
    seeds_used = config.dataset_seeds * config.run_seeds
    for n in config.sweep_n:
        train = replace(config.train, n=n,
                        b=min(config.train.b, n))
        ensemble = run_ensemble(train, config.dataset_seeds,
                                config.run_seeds, jobs=jobs or 1)
        gen = estimate_generalization_error(ensemble)
        for name in names:
            if name == "terminal-general":
                rep = bounds_mod.terminal_bound_general(ensemble, R=config.R)
            elif name == "terminal-anisotropic":
                rep = bounds_mod.terminal_bound_anisotropic(ensemble, R=config.R)
            elif name == "terminal-isotropic":
                rep = bounds_mod.terminal_bound_isotropic(
                    ensemble, reference=config.reference, R=config.R)
            else:
                rep = bounds_mod.fim_takeuchi_bound(ensemble, M=config.M)
            rows.append((n, name, rep.core, rep.value, gen, seeds_used))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv",
                   ("n", "bound", "core", "value", "gen_error", "seeds_used"),
                   rows)
    return rows


_COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "bounds-traj": cmd_bounds_traj,
    "bounds-terminal": cmd_bounds_terminal,
    "stationary": cmd_stationary,
    "sweep-n": cmd_sweep_n,
}


def resolve_jobs(flag_value=None):
    """Worker count: --jobs flag, else GRADNOISE_JOBS, else cpu count."""
    if flag_value is not None:
        return max(1, int(flag_value))
    env = os.environ.get("GRADNOISE_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"GRADNOISE_JOBS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def run_cli(argv):
    """Argument parsing and dispatch; returns the process exit code."""
    import argparse

    parser = argparse.ArgumentParser(
        prog="gradnoise",
        description="SGD gradient-noise analysis and generalization bounds")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--jobs", type=int, default=None)
    args = parser.parse_args(argv)
    try:
        config = load_experiment_config(args.config, seed_override=args.seed,
                                        out_override=args.out)
        jobs = resolve_jobs(args.jobs)
        result = _COMMANDS[args.command](config, out_dir=config.out_dir,
                                         jobs=jobs)
        if args.command == "train" and result[0]["diverged"]:
            print("run diverged at step "
                  f"{result[0]['diverged_step']}; partial record written",
                  file=sys.stderr)
            return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GradnoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0
