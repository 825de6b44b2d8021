"""Generalization-bound estimators evaluated from runs of the dynamics module.

Two families live here. Trajectory bounds fold per-step KL surrogate terms
over an entire run (statistics taken at each pre-update state); terminal
bounds look only at the distribution of final weights across an ensemble.
Every estimator returns a BoundReport whose ``core`` is the bound with the
loss-range constants R and M set to 1 and whose ``value`` is exactly
``core * R`` or ``core * M``; which constant applies is part of each bound's
contract.

Expectations over datasets and over algorithmic randomness are plug-in
estimates: statistics are averaged across whatever records or ensemble
members are supplied, and ``n_runs_used`` records how many that was. When a
covariance floor activates inside a log-determinant the report is flagged
``floored-log`` and a sensitivity value recomputed at 10x the floor is
attached, so bound values never silently depend on the regularizer.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigError, NumericalError, StabilityError
from .gradstats import minibatch_factor
from .linalg import (
    DEFAULT_EPS_REL,
    DEFAULT_FLOOR_ABS,
    SpdMatrix,
    log_det,
    solve_stationary_covariance,
    trace_log_diag,
)
from .problems import (
    build_problem,
    dense_hessian,
    generate_dataset,
    population_oracle_sample,
)

FLOOR_SENSITIVITY_SCALE = 10.0


@dataclass(frozen=True)
class GTildeChoice:
    """Reference gradient entering the trajectory priors.

    The reference must not depend on the training sample, so the options are
    zero, the population gradient (estimated from the oracle sample), or a
    fixed custom vector applied at every step.
    """

    kind: str = "zero"
    custom_vector: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "population-gradient", "custom"):
            raise ConfigError(f"unknown g-tilde kind {self.kind!r}")
        if self.kind == "custom" and self.custom_vector is None:
            raise ConfigError("custom g-tilde requires custom_vector")


@dataclass
class BoundReport:
    name: str
    value: float
    core: float
    per_step_terms: np.ndarray | None
    components: dict
    config: dict
    n_runs_used: int
    flags: tuple
    extra_series: dict | None = None


@dataclass(frozen=True)
class StepStats:
    """Plug-in statistics for one accumulated update, for one run."""

    step: int
    eta: float
    grad: np.ndarray
    raw_gnc: np.ndarray
    gnc: SpdMatrix
    trace_c: float
    pop_grad: np.ndarray | None
    raw_pop_gnc: np.ndarray | None
    pop_gnc: SpdMatrix | None


@dataclass(frozen=True)
class TrajectoryTape:
    """Per-run, per-step statistics recomputed from logged weights.

    ``runs[r][k]`` holds the statistics of run r at the k-th represented
    update. With logging cadence 1 every update is represented; a coarser
    cadence represents each logged state for ``scale`` updates and bound sums
    are rescaled accordingly (flagged approximate).
    """

    runs: tuple
    n: int
    b: int
    dim: int
    total_steps: int
    scale: int
    mode: str
    has_population: bool
    approximate: bool
    any_diverged: bool

    @property
    def n_runs(self):
        return len(self.runs)

    @property
    def n_steps(self):
        return len(self.runs[0])


def _floored_spd(raw, eps_scale):
    return SpdMatrix.from_matrix(
        raw,
        eps_rel=DEFAULT_EPS_REL * eps_scale,
        floor_abs=DEFAULT_FLOOR_ABS * eps_scale,
    )


def tape_from_records(records, population=False):
    """Build a TrajectoryTape by re-evaluating gradients at logged weights.

    Records must have been produced with ``record_weights=True`` and share
    their shape-determining config fields. Statistics at the final logged
    state are not included: sums run over pre-update states only.
    """
    if not records:
        raise ConfigError("need at least one trajectory record")
    first = records[0].config
    for rec in records:
        if rec.weights is None:
            raise ConfigError("tape requires record_weights=True runs")
        c = rec.config
        if (c.n, c.b, c.steps, c.lr_schedule, c.log_every, c.mode) != (
            first.n, first.b, first.steps, first.lr_schedule,
            first.log_every, first.mode,
        ):
            raise ConfigError("tape records must share n, b, steps, schedule, "
                              "cadence, and mode")
    oracle = population_oracle_sample(first.spec, first.oracle_seed) if population else None
    runs = []
    any_diverged = any(rec.diverged for rec in records)
    for rec in records:
        problem = build_problem(rec.config.spec)
        dataset = generate_dataset(rec.config.spec, rec.dataset_seed, rec.config.n)
        factor = minibatch_factor(rec.config.n, rec.config.b)
        stats = []
        for k in range(len(rec.steps) - 1):
            state_step = int(rec.steps[k])
            w = rec.weights[k]
            grads = problem.per_example_grads(w, dataset.features, dataset.labels)
            mean = grads.mean(axis=0)
            sigma = grads.T @ grads / len(dataset) - np.outer(mean, mean)
            raw_c = factor * (sigma + sigma.T) / 2.0
            gnc = _floored_spd(raw_c, 1.0)
            pop_grad = raw_pop = pop = None
            if population:
                ograds = problem.per_example_grads(w, oracle.features, oracle.labels)
                om = ograds.mean(axis=0)
                raw = ograds.T @ ograds / len(oracle) - np.outer(om, om)
                raw_pop = (raw + raw.T) / 2.0
                pop = _floored_spd(raw_pop, 1.0)
                pop_grad = om
            stats.append(StepStats(
                step=state_step + 1,
                eta=rec.config.lr_at(state_step + 1),
                grad=mean,
                raw_gnc=raw_c,
                gnc=gnc,
                trace_c=float(np.trace(raw_c)),
                pop_grad=pop_grad,
                raw_pop_gnc=raw_pop,
                pop_gnc=pop,
            ))
        runs.append(tuple(stats))
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        raise ConfigError("tape records disagree on logged step count "
                          "(mixed divergence truncation)")
    return TrajectoryTape(
        runs=tuple(runs),
        n=first.n,
        b=first.b,
        dim=records[0].final_w.shape[0],
        total_steps=first.steps,
        scale=first.log_every,
        mode=first.mode,
        has_population=population,
        approximate=first.log_every > 1,
        any_diverged=any_diverged,
    )


def _reference_gradient(choice, stats, dim):
    if choice.kind == "zero":
        return np.zeros(dim)
    if choice.kind == "population-gradient":
        if stats.pop_grad is None:
            raise ConfigError("population-gradient g-tilde needs a tape built "
                              "with population=True")
        return stats.pop_grad
    vec = np.asarray(choice.custom_vector, dtype=float)
    if vec.shape != (dim,):
        raise ConfigError(f"custom g-tilde has shape {vec.shape}, expected ({dim},)")
    return vec


def isotropic_step_kl(sigma_sq, h1, h2, d):
    """KL between one SDE transition and an isotropic prior step, as a
    function of the prior variance scale.

    Closed form (step size cancels): 0.5 * (h1/sigma_sq - d + d log sigma_sq
    - h2), minimized at sigma_sq = h1/d.
    """
    if sigma_sq <= 0:
        raise ConfigError("sigma_sq must be positive")
    return 0.5 * (h1 / sigma_sq - d + d * np.log(sigma_sq) - h2)


def anisotropic_prior_objective(c_tilde, pop_gnc, gnc):
    """Twice the per-step KL against a population-shaped prior with scale
    c_tilde; minimized at c_tilde = tr(pop_gnc^{-1} gnc) / d.
    """
    if c_tilde <= 0:
        raise ConfigError("c_tilde must be positive")
    d = pop_gnc.dim
    cross = pop_gnc.inv_trace_product(gnc.matrix)
    return (d * np.log(c_tilde) + log_det(pop_gnc) - log_det(gnc) - d
            + cross / c_tilde)


def isotropic_terminal_kl(sigma_sq, msd, d, eta, b):
    """KL of the terminal-weight Gaussian surrogate against an isotropic
    prior of variance sigma_sq; minimized at sigma_sq = msd/d + eta/(2b).
    """
    if sigma_sq <= 0:
        raise ConfigError("sigma_sq must be positive")
    base = eta / (2.0 * b)
    return 0.5 * (d * np.log(sigma_sq) - d * np.log(base) - d
                  + (msd + d * base) / sigma_sq)


def _sqrt_core(total, flags):
    if total < 0:
        flags.append("nonpositive-sum")
        return 0.0
    return float(np.sqrt(total))


def _tape_config_dict(tape, R, M, g_choice=None):
    eta_final = tape.runs[0][-1].eta if tape.runs[0] else None
    return {
        "R": R, "M": M, "n": tape.n, "b": tape.b, "eta": eta_final,
        "T": tape.total_steps,
        "g_tilde": None if g_choice is None else g_choice.kind,
    }


def traj_bound_isotropic(tape, g_choice=None, R=1.0):
    """Trajectory bound with the best isotropic Gaussian prior per step.

    Per accumulated step the term is d log(h1/d) - h2 with h1 the mean of
    ||G_t - g_tilde||^2 + tr C_t across runs and h2 the mean log-determinant
    of the floored mini-batch GNC; the core is sqrt of (1/n) times the
    (cadence-rescaled) sum. With the population-gradient reference the report
    also carries the identity estimate of h1 (population GNC trace over b)
    and the per-step terms it induces, which is the form the anisotropic
    comparison applies to.
    """
    if g_choice is None:
        g_choice = GTildeChoice(kind="zero")
    flags = []
    if tape.any_diverged:
        flags.append("diverged-runs")
    if tape.approximate:
        flags.append("approximate-cadence")
    d = tape.dim

    def per_step(eps_scale):
        terms = np.empty(tape.n_steps)
        h1s = np.empty(tape.n_steps)
        h2s = np.empty(tape.n_steps)
        floored = False
        for k in range(tape.n_steps):
            h1_vals, h2_vals = [], []
            for run in tape.runs:
                st = run[k]
                gt = _reference_gradient(g_choice, st, d)
                diff = st.grad - gt
                h1_vals.append(float(diff @ diff) + st.trace_c)
                mat = st.gnc if eps_scale == 1.0 else _floored_spd(st.raw_gnc, eps_scale)
                floored = floored or mat.floored
                h2_vals.append(log_det(mat))
            h1 = float(np.mean(h1_vals))
            h2 = float(np.mean(h2_vals))
            if h1 <= 0:
                raise NumericalError(f"h1 <= 0 at step {tape.runs[0][k].step}")
            terms[k] = d * np.log(h1 / d) - h2
            h1s[k], h2s[k] = h1, h2
        return terms, h1s, h2s, floored

    terms, h1s, h2s, floored = per_step(1.0)
    total = tape.scale * float(terms.sum())
    if floored:
        flags.append("floored-log")
    core = _sqrt_core(total / tape.n, flags)
    components = {
        "term_sum": total,
        "h1_mean": float(h1s.mean()),
        "h2_mean": float(h2s.mean()),
        "sigma_star_sq_final": float(h1s[-1] / d),
    }
    extra = {"h1": h1s, "h2": h2s}
    if g_choice.kind == "population-gradient":
        id_h1 = np.empty(tape.n_steps)
        for k in range(tape.n_steps):
            vals = [np.trace(run[k].raw_pop_gnc) / tape.b for run in tape.runs]
            id_h1[k] = float(np.mean(vals))
        with np.errstate(divide="ignore"):
            id_terms = d * np.log(id_h1 / d) - h2s
        extra["identity_h1"] = id_h1
        extra["identity_per_step_terms"] = id_terms
        components["h1_identity_mean"] = float(id_h1.mean())
        components["h1_discrepancy_mean"] = float(np.mean(np.abs(h1s - id_h1)))
    if floored:
        terms10, _, _, _ = per_step(FLOOR_SENSITIVITY_SCALE)
        total10 = tape.scale * float(terms10.sum())
        components["core_at_10x_floor"] = _sqrt_core(total10 / tape.n, [])
    return BoundReport(
        name="trajectory-isotropic",
        value=R * core,
        core=core,
        per_step_terms=terms,
        components=components,
        config=_tape_config_dict(tape, R, None, g_choice),
        n_runs_used=tape.n_runs,
        flags=tuple(flags),
        extra_series=extra,
    )


def traj_bound_langevin(tape, g_choice=None, R=1.0):
    """Trajectory bound specialized to identity noise covariance.

    Per-step term log(mean ||G_t - g_tilde||^2 / d + 1); the core multiplies
    the (1/n) sum by d before the square root. Applying it to a run whose
    mode was not gld is allowed but flagged counterfactual. The sum with
    log(x+1) replaced by x (the looser classical form) is reported as a
    component, and per-step looser terms as an extra series.
    """
    if g_choice is None:
        g_choice = GTildeChoice(kind="zero")
    flags = []
    if tape.mode != "gld":
        flags.append("counterfactual-mode")
    if tape.any_diverged:
        flags.append("diverged-runs")
    if tape.approximate:
        flags.append("approximate-cadence")
    d = tape.dim
    terms = np.empty(tape.n_steps)
    loose = np.empty(tape.n_steps)
    for k in range(tape.n_steps):
        vals = []
        for run in tape.runs:
            st = run[k]
            diff = st.grad - _reference_gradient(g_choice, st, d)
            vals.append(float(diff @ diff))
        x = float(np.mean(vals)) / d
        terms[k] = np.log1p(x)
        loose[k] = x
    total = tape.scale * float(terms.sum())
    core = _sqrt_core(d * total / tape.n, flags)
    return BoundReport(
        name="trajectory-langevin",
        value=R * core,
        core=core,
        per_step_terms=terms,
        components={
            "term_sum": total,
            "loose_term_sum": tape.scale * float(loose.sum()),
        },
        config=_tape_config_dict(tape, R, None, g_choice),
        n_runs_used=tape.n_runs,
        flags=tuple(flags),
        extra_series={"loose_per_step_terms": loose},
    )


def traj_bound_anisotropic(tape, R=1.0):
    """Trajectory bound with the best population-shaped prior per step.

    Per-step term: mean across runs of log det(pop GNC) - log det(b * C_t).
    The diagonal-alignment decomposition (sum over coordinates of the log
    ratio of diagonal entries) is reported as an extra series; it upper
    bounds the full term for SPD matrices.
    """
    if not tape.has_population:
        raise ConfigError("anisotropic bound needs a tape built with population=True")
    flags = []
    if tape.any_diverged:
        flags.append("diverged-runs")
    if tape.approximate:
        flags.append("approximate-cadence")
    d = tape.dim
    log_b = d * np.log(tape.b)

    def per_step(eps_scale):
        terms = np.empty(tape.n_steps)
        diag_terms = np.empty(tape.n_steps)
        floored = False
        for k in range(tape.n_steps):
            vals, dvals = [], []
            for run in tape.runs:
                st = run[k]
                if eps_scale == 1.0:
                    pop, c = st.pop_gnc, st.gnc
                else:
                    pop = _floored_spd(st.raw_pop_gnc, eps_scale)
                    c = _floored_spd(st.raw_gnc, eps_scale)
                floored = floored or pop.floored or c.floored
                vals.append(log_det(pop) - log_det(c) - log_b)
                dvals.append(trace_log_diag(pop.matrix)
                             - trace_log_diag(c.matrix) - log_b)
            terms[k] = float(np.mean(vals))
            diag_terms[k] = float(np.mean(dvals))
        return terms, diag_terms, floored

    terms, diag_terms, floored = per_step(1.0)
    if floored:
        flags.append("floored-log")
    total = tape.scale * float(terms.sum())
    core = _sqrt_core(total / tape.n, flags)
    components = {"term_sum": total,
                  "diag_term_sum": tape.scale * float(diag_terms.sum())}
    if floored:
        terms10, _, _ = per_step(FLOOR_SENSITIVITY_SCALE)
        components["core_at_10x_floor"] = _sqrt_core(
            tape.scale * float(terms10.sum()) / tape.n, [])
    return BoundReport(
        name="trajectory-anisotropic",
        value=R * core,
        core=core,
        per_step_terms=terms,
        components=components,
        config=_tape_config_dict(tape, R, None),
        n_runs_used=tape.n_runs,
        flags=tuple(flags),
        extra_series={"diag_alignment": diag_terms},
    )


def _loo_index_sets(n, max_enumeration, n_subsets, rng):
    if n <= max_enumeration:
        return [np.array([j for j in range(n) if j != i]) for i in range(n)]
    dropped = rng.choice(n, size=min(n_subsets, n), replace=False)
    return [np.array([j for j in range(n) if j != i]) for i in sorted(dropped)]


def traj_bound_data_dependent(records, M=1.0, max_enumeration=12, n_subsets=64,
                              seed=0):
    """Trajectory bound with leave-one-out data-dependent priors.

    Uses the within-batch scaling convention C = Sigma/b for both the full
    and the subsample GNCs (this analysis fixes that convention; it differs
    from the exact mini-batch factor by O(1/n)). Per step the term is
    (b-1) d/(n-1)^2 plus the mean over leave-one-out subsets J of
    log det C - log det C_J; the core averages sqrt(sum of terms) across
    records, keeping the dataset expectation outside the square root.
    """
    if not records:
        raise ConfigError("need at least one trajectory record")
    cfg = records[0].config
    n, b = cfg.n, cfg.b
    m = n - 1
    if m <= b:
        raise ConfigError(f"data-dependent bound needs n-1 > b, got n={n}, b={b}")
    d = records[0].final_w.shape[0]
    flags = []
    if cfg.log_every > 1:
        flags.append("approximate-cadence")
    if any(rec.diverged for rec in records):
        flags.append("diverged-runs")
    rng = np.random.default_rng(seed)
    subsets = _loo_index_sets(n, max_enumeration, n_subsets, rng)
    if n > max_enumeration:
        flags.append("sampled-subsets")
    const = (b - 1) * d / (n - 1) ** 2

    floored = False
    per_record_cores = []
    mean_terms = None
    for rec in records:
        if rec.weights is None:
            raise ConfigError("data-dependent bound requires record_weights=True")
        problem = build_problem(rec.config.spec)
        dataset = generate_dataset(rec.config.spec, rec.dataset_seed, n)
        terms = []
        for k in range(len(rec.steps) - 1):
            w = rec.weights[k]
            grads = problem.per_example_grads(w, dataset.features, dataset.labels)
            mean = grads.mean(axis=0)
            sigma = grads.T @ grads / n - np.outer(mean, mean)
            c_full = _floored_spd(sigma / b, 1.0)
            floored = floored or c_full.floored
            ld_full = log_det(c_full)
            ld_subs = []
            for idx in subsets:
                sub = grads[idx]
                gj = sub.mean(axis=0)
                sj = sub.T @ sub / m - np.outer(gj, gj)
                cj = _floored_spd(sj / b, 1.0)
                floored = floored or cj.floored
                ld_subs.append(log_det(cj))
            terms.append(const + ld_full - float(np.mean(ld_subs)))
        terms = np.asarray(terms)
        total = cfg.log_every * float(terms.sum())
        per_record_cores.append(_sqrt_core(total, flags))
        mean_terms = terms if mean_terms is None else mean_terms + terms
    mean_terms = mean_terms / len(records)
    if floored:
        flags.append("floored-log")
    core = float(np.mean(per_record_cores))
    return BoundReport(
        name="trajectory-data-dependent",
        value=M * core,
        core=core,
        per_step_terms=mean_terms,
        components={
            "per_record_cores_mean": core,
            "constant_per_step": const,
            "n_subsets": len(subsets),
        },
        config={"R": None, "M": M, "n": n, "b": b,
                "eta": cfg.lr_at(cfg.steps), "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(records),
        flags=tuple(flags),
    )


def _terminal_samples(ensemble, use_tails=True):
    """Per-dataset weight samples: final weights plus tail checkpoints."""
    groups = {}
    skipped = 0
    for run in ensemble.runs:
        if run.diverged:
            skipped += 1
            continue
        if use_tails and run.tail_weights is not None:
            rows = run.tail_weights
        else:
            rows = run.final_w[None, :]
        groups.setdefault(run.dataset_seed, []).append(rows)
    groups = {k: np.vstack(v) for k, v in groups.items()}
    return groups, skipped


def _covariance(rows):
    mu = rows.mean(axis=0)
    centered = rows - mu
    denom = max(rows.shape[0] - 1, 1)
    return mu, centered.T @ centered / denom


def terminal_bound_general(ensemble, R=1.0):
    """Terminal-state bound from within-dataset vs pooled weight covariances.

    Per dataset seed the term is log det(pooled covariance) minus log det
    (within-dataset covariance), both floored; the core is sqrt of the mean
    term over 2n. Deterministic dynamics collapse the within-dataset scatter
    to zero, in which case the value is the flooring-determined cap and the
    report carries the deterministic-failure flag rather than pretending the
    bound is finite.
    """
    groups, skipped = _terminal_samples(ensemble)
    if not groups:
        raise ConfigError("ensemble has no usable (non-diverged) runs")
    flags = []
    if skipped:
        flags.append("diverged-runs")
    if len(groups) == 1:
        flags.append("single-dataset-group")
    counts = {k: v.shape[0] for k, v in groups.items()}
    if min(counts.values()) < 2:
        raise ConfigError("each dataset group needs at least 2 weight samples")
    d = next(iter(groups.values())).shape[1]
    if min(counts.values()) < 4 * d:
        flags.append("undersampled-covariance")
    all_rows = np.vstack(list(groups.values()))
    _, pooled_raw = _covariance(all_rows)
    pooled_scale = max(float(np.trace(pooled_raw)), DEFAULT_FLOOR_ABS)
    within_raw = {k: _covariance(v)[1] for k, v in groups.items()}
    deterministic = any(
        float(np.trace(w)) <= 1e-18 * pooled_scale for w in within_raw.values()
    )

    def evaluate(eps_scale):
        pooled = _floored_spd(pooled_raw, eps_scale)
        floored = pooled.floored
        ld_pooled = log_det(pooled)
        terms = {}
        for k, raw in within_raw.items():
            mat = _floored_spd(raw, eps_scale)
            floored = floored or mat.floored
            terms[k] = ld_pooled - log_det(mat)
        return ld_pooled, terms, floored

    ld_pooled, terms, floored = evaluate(1.0)
    if floored:
        flags.append("floored-log")
    if deterministic:
        flags.extend(["deterministic-failure", "flooring-cap"])
    mean_term = float(np.mean(list(terms.values())))
    n = ensemble.config.n
    core = _sqrt_core(mean_term / (2.0 * n), flags)
    components = {
        "mean_term": mean_term,
        "logdet_pooled": ld_pooled,
        "mean_logdet_within": ld_pooled - mean_term,
        "min_group_samples": min(counts.values()),
    }
    if floored:
        _, terms10, _ = evaluate(FLOOR_SENSITIVITY_SCALE)
        components["core_at_10x_floor"] = _sqrt_core(
            float(np.mean(list(terms10.values()))) / (2.0 * n), [])
    cfg = ensemble.config
    return BoundReport(
        name="terminal-general",
        value=R * core,
        core=core,
        per_step_terms=None,
        components=components,
        config={"R": R, "M": None, "n": n, "b": cfg.b,
                "eta": cfg.lr_at(cfg.steps), "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(ensemble.runs) - skipped,
        flags=tuple(flags),
    )


def terminal_bound_anisotropic(ensemble, R=1.0):
    """Terminal-state bound with the within-dataset covariance replaced by
    its stationary closed form.

    Per dataset seed, at the group-mean terminal weight: dense Hessian H,
    exact-factor mini-batch GNC C_T, and the pooled terminal covariance give
    the term log det H - log det C_T + log det(pooled). Requires the top
    Hessian eigenvalue to sit strictly below 2/eta (checked per dataset);
    commutator norms between H and the stationary solve are reported as
    condition diagnostics.
    """
    groups, skipped = _terminal_samples(ensemble)
    if not groups:
        raise ConfigError("ensemble has no usable (non-diverged) runs")
    flags = []
    if skipped:
        flags.append("diverged-runs")
    if len(groups) == 1:
        flags.append("single-dataset-group")
    cfg = ensemble.config
    n, b = cfg.n, cfg.b
    eta = cfg.lr_at(cfg.steps)
    all_rows = np.vstack(list(groups.values()))
    _, pooled_raw = _covariance(all_rows)
    problem = build_problem(cfg.spec)

    per_dataset = {}
    for ds_seed, rows in groups.items():
        dataset = generate_dataset(cfg.spec, ds_seed, n)
        w_star = rows.mean(axis=0)
        h_raw = dense_hessian(problem, w_star, dataset.features, dataset.labels)
        eigs = np.linalg.eigvalsh((h_raw + h_raw.T) / 2.0)
        gap = 2.0 / eta - float(eigs[-1])
        if gap <= 0:
            raise StabilityError(
                f"top Hessian eigenvalue {eigs[-1]:.6g} exceeds 2/eta = "
                f"{2.0 / eta:.6g} for dataset seed {ds_seed}",
                eigenvalue=float(eigs[-1]),
            )
        grads = problem.per_example_grads(w_star, dataset.features, dataset.labels)
        mean = grads.mean(axis=0)
        sigma = grads.T @ grads / n - np.outer(mean, mean)
        c_raw = minibatch_factor(n, b) * (sigma + sigma.T) / 2.0
        per_dataset[ds_seed] = (h_raw, c_raw, gap)

    def evaluate(eps_scale):
        pooled = _floored_spd(pooled_raw, eps_scale)
        floored = pooled.floored
        ld_pooled = log_det(pooled)
        terms, commutators, gaps = {}, [], []
        for ds_seed, (h_raw, c_raw, gap) in per_dataset.items():
            h = _floored_spd(h_raw, eps_scale)
            c = _floored_spd(c_raw, eps_scale)
            floored = floored or h.floored or c.floored
            terms[ds_seed] = log_det(h) - log_det(c) + ld_pooled
            lam = solve_stationary_covariance(h.matrix, c.matrix, eta,
                                              mode="general")
            comm = h.matrix @ lam - lam @ h.matrix
            commutators.append(float(np.linalg.norm(comm)))
            gaps.append(gap)
        return ld_pooled, terms, commutators, gaps, floored

    ld_pooled, terms, commutators, gaps, floored = evaluate(1.0)
    if floored:
        flags.append("floored-log")
    mean_term = float(np.mean(list(terms.values())))
    core = _sqrt_core(mean_term / (n * eta), flags)
    components = {
        "mean_term": mean_term,
        "logdet_pooled": ld_pooled,
        "commutator_norm_mean": float(np.mean(commutators)),
        "min_stability_gap": float(np.min(gaps)),
    }
    if floored:
        _, terms10, _, _, _ = evaluate(FLOOR_SENSITIVITY_SCALE)
        components["core_at_10x_floor"] = _sqrt_core(
            float(np.mean(list(terms10.values()))) / (n * eta), [])
    return BoundReport(
        name="terminal-anisotropic",
        value=R * core,
        core=core,
        per_step_terms=None,
        components=components,
        config={"R": R, "M": None, "n": n, "b": b, "eta": eta,
                "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(ensemble.runs) - skipped,
        flags=tuple(flags),
    )


def terminal_bound_isotropic(ensemble, reference="grand-mean", R=1.0):
    """Closed-form terminal bound from mean squared distance to a reference.

    ``reference`` is "grand-mean" (the pooled mean terminal weight),
    "init" (each run's own initialization, the distance-to-initialization
    form), or an explicit vector. The core is
    sqrt((d/n) log((2b/(eta d)) msd + 1)), nonnegative by construction.
    """
    runs = [r for r in ensemble.runs if not r.diverged]
    if not runs:
        raise ConfigError("ensemble has no usable (non-diverged) runs")
    flags = [] if len(runs) == len(ensemble.runs) else ["diverged-runs"]
    finals = np.array([r.final_w for r in runs])
    d = finals.shape[1]
    if isinstance(reference, str) and reference == "grand-mean":
        ref = finals.mean(axis=0)
        sq = np.sum((finals - ref) ** 2, axis=1)
    elif isinstance(reference, str) and reference == "init":
        if any(r.w0 is None for r in runs):
            raise ConfigError("init reference needs stored initial weights")
        sq = np.array([float(np.sum((r.final_w - r.w0) ** 2)) for r in runs])
        ref = None
    elif isinstance(reference, str):
        raise ConfigError(f"unknown reference {reference!r}")
    else:
        ref = np.asarray(reference, dtype=float)
        if ref.shape != (d,):
            raise ConfigError(f"reference vector has shape {ref.shape}, "
                              f"expected ({d},)")
        sq = np.sum((finals - ref) ** 2, axis=1)
    msd = float(np.mean(sq))
    cfg = ensemble.config
    n, b = cfg.n, cfg.b
    eta = cfg.lr_at(cfg.steps)
    inner = (2.0 * b / (eta * d)) * msd + 1.0
    core = float(np.sqrt((d / n) * np.log(inner)))
    ref_name = reference if isinstance(reference, str) else "custom"
    return BoundReport(
        name="terminal-isotropic",
        value=R * core,
        core=core,
        per_step_terms=None,
        components={
            "mean_sq_distance": msd,
            "inner": inner,
            "sigma_star_sq": msd / d + eta / (2.0 * b),
            "reference": ref_name,
        },
        config={"R": R, "M": None, "n": n, "b": b, "eta": eta,
                "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(runs),
        flags=tuple(flags),
    )


def terminal_bound_gradient_accum(records, R=1.0):
    """Terminal bound from accumulated gradient and noise magnitudes.

    Plugs the run-sum of ||G_t||^2 + tr C_t into
    sqrt((d/n) log((4 b T eta / d) * sum + 1)). Assumes training started at
    the origin; a nonzero initialization is flagged, as is a logging cadence
    above 1 (rescaled sum) and a nonconstant schedule (largest eta used).
    """
    if not records:
        raise ConfigError("need at least one trajectory record")
    cfg = records[0].config
    flags = []
    if any(rec.diverged for rec in records):
        flags.append("diverged-runs")
    if cfg.log_every > 1:
        flags.append("approximate-cadence")
    etas = {e for _, e in cfg.lr_schedule}
    eta = max(etas)
    if len(etas) > 1:
        flags.append("nonconstant-lr")
    if any(float(np.linalg.norm(rec.w0)) > 0 for rec in records):
        flags.append("nonzero-init")
    sums = []
    for rec in records:
        per_step = rec.grad_norm_sq[:-1] + rec.trace_c[:-1]
        sums.append(cfg.log_every * float(per_step.sum()))
    mean_sum = float(np.mean(sums))
    d = records[0].final_w.shape[0]
    n, b, T = cfg.n, cfg.b, cfg.steps
    inner = (4.0 * b * T * eta / d) * mean_sum + 1.0
    core = float(np.sqrt((d / n) * np.log(inner)))
    return BoundReport(
        name="terminal-gradient-accumulation",
        value=R * core,
        core=core,
        per_step_terms=None,
        components={"accumulated_sum": mean_sum, "inner": inner},
        config={"R": R, "M": None, "n": n, "b": b, "eta": eta, "T": T,
                "g_tilde": None},
        n_runs_used=len(records),
        flags=tuple(flags),
    )


def terminal_bound_loo(pairs, M=1.0):
    """Stability bound from paired full/leave-out terminal weights.

    ``pairs`` is a sequence of (full_record, loo_record); pairs sharing
    (dataset seed, loo size) form a group whose runs estimate the inner
    expectation, and the core is the mean over groups of
    sqrt((b/(2 eta)) * mean ||W_S - W_SJ||^2). Records must be paired: same
    run seed and dataset seed, with the leave-out run trained on fewer
    examples under the same schedule.
    """
    if not pairs:
        raise ConfigError("need at least one (full, loo) record pair")
    groups = {}
    for full, loo in pairs:
        if loo.config.n >= full.config.n:
            raise ConfigError("loo record must be trained on fewer examples")
        if (full.config.seed != loo.config.seed
                or full.dataset_seed != loo.dataset_seed):
            raise ConfigError("unpaired runs: full and loo records must share "
                              "run seed and dataset seed")
        if full.config.b != loo.config.b:
            raise ConfigError("unpaired runs: batch sizes differ")
        key = (full.dataset_seed, loo.config.n)
        groups.setdefault(key, []).append((full, loo))
    cfg = pairs[0][0].config
    b = cfg.b
    eta = cfg.lr_at(cfg.steps)
    flags = []
    if any(f.diverged or l.diverged for f, l in pairs):
        flags.append("diverged-runs")
    cores = []
    sq_means = []
    frob = []
    for key, members in groups.items():
        sq = [float(np.sum((f.final_w - l.final_w) ** 2)) for f, l in members]
        mean_sq = float(np.mean(sq))
        sq_means.append(mean_sq)
        cores.append(float(np.sqrt((b / (2.0 * eta)) * mean_sq)))
        if len(members) >= 2:
            _, cov_full = _covariance(np.array([f.final_w for f, _ in members]))
            _, cov_loo = _covariance(np.array([l.final_w for _, l in members]))
            frob.append(float(np.linalg.norm(cov_full - cov_loo)))
    core = float(np.mean(cores))
    components = {"mean_sq_shift": float(np.mean(sq_means)), "n_groups": len(groups)}
    if frob:
        components["lambda_frobenius_distance_mean"] = float(np.mean(frob))
    return BoundReport(
        name="terminal-loo",
        value=M * core,
        core=core,
        per_step_terms=None,
        components=components,
        config={"R": None, "M": M, "n": cfg.n, "b": b, "eta": eta,
                "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(pairs),
        flags=tuple(flags),
    )


def influence_estimate(problem, w_star, dataset, index, cg_tol=1e-10,
                       damping=0.0, grad_norm_threshold=1e-3):
    """First-order estimate of the weight shift from dropping one example.

    Solves H x = grad of the dropped example's loss at ``w_star`` by
    conjugate gradients on the HVP operator (with optional Tikhonov damping)
    and returns x / n. Warns when ``w_star`` does not look like a minimum.
    The estimate carries the well-known 1/n vs 1/(n-1) finite-sample gap:
    multiplying by n/(n-1) recovers the exact shift on quadratic problems.
    """
    n = len(dataset)
    if not 0 <= index < n:
        raise ConfigError(f"index {index} out of range for dataset of size {n}")
    full_grad = problem.mean_grad(w_star, dataset.features, dataset.labels)
    gnorm = float(np.linalg.norm(full_grad))
    if gnorm > grad_norm_threshold:
        warnings.warn(
            f"influence_estimate called away from a minimum "
            f"(gradient norm {gnorm:.3g})", stacklevel=2)
    grads = problem.per_example_grads(
        w_star, dataset.features[index:index + 1], dataset.labels[index:index + 1])
    g = grads[0]
    if not np.any(g):
        return np.zeros(problem.dim)

    def matvec(v):
        hv = problem.hvp(w_star, dataset.features, dataset.labels, v)
        return hv + damping * v if damping else hv

    op = LinearOperator((problem.dim, problem.dim), matvec=matvec, dtype=float)
    x, info = cg(op, g, rtol=cg_tol, atol=0.0, maxiter=10 * problem.dim + 50)
    if info != 0:
        residual = float(np.linalg.norm(matvec(x) - g))
        raise NumericalError(
            f"conjugate gradients did not converge (info={info}, "
            f"residual={residual:.3g})")
    return x / n


def fim_takeuchi_bound(ensemble, M=1.0):
    """Bound from the trace of inverse Hessian times population Fisher.

    Per dataset seed, at the group-mean terminal weight: dense training
    Hessian H and the uncentered oracle-sample second moment of per-example
    gradients F. The core is (1/(2n)) times the mean over dataset seeds of
    sqrt(tr(H^{-1} F)).
    """
    groups, skipped = _terminal_samples(ensemble)
    if not groups:
        raise ConfigError("ensemble has no usable (non-diverged) runs")
    cfg = ensemble.config
    n = cfg.n
    problem = build_problem(cfg.spec)
    oracle = population_oracle_sample(cfg.spec, cfg.oracle_seed)
    flags = []
    if skipped:
        flags.append("diverged-runs")
    traces = {}
    floored = False
    for ds_seed, rows in groups.items():
        dataset = generate_dataset(cfg.spec, ds_seed, n)
        w_star = rows.mean(axis=0)
        h_raw = dense_hessian(problem, w_star, dataset.features, dataset.labels)
        h = _floored_spd(h_raw, 1.0)
        floored = floored or h.floored
        ograds = problem.per_example_grads(w_star, oracle.features, oracle.labels)
        fim = ograds.T @ ograds / len(oracle)
        traces[ds_seed] = h.inv_trace_product(fim)
    if floored:
        flags.append("floored-log")
    core = float(np.mean([np.sqrt(max(t, 0.0)) for t in traces.values()])) / (2.0 * n)
    return BoundReport(
        name="fim-takeuchi",
        value=M * core,
        core=core,
        per_step_terms=None,
        components={
            "mean_trace": float(np.mean(list(traces.values()))),
            "max_trace": float(np.max(list(traces.values()))),
        },
        config={"R": None, "M": M, "n": n, "b": cfg.b,
                "eta": cfg.lr_at(cfg.steps), "T": cfg.steps, "g_tilde": None},
        n_runs_used=len(ensemble.runs) - skipped,
        flags=tuple(flags),
    )


def report_to_json_dict(report):
    """JSON-safe dictionary form of a BoundReport (series become lists)."""
    out = {
        "name": report.name,
        "value": report.value,
        "core": report.core,
        "components": {k: (v if isinstance(v, (int, float, str)) else float(v))
                       for k, v in report.components.items()},
        "config": report.config,
        "n_runs_used": report.n_runs_used,
        "flags": list(report.flags),
    }
    if report.per_step_terms is not None:
        out["per_step_terms"] = [float(x) for x in report.per_step_terms]
    if report.extra_series:
        out["extra_series"] = {k: [float(x) for x in np.atleast_1d(v)]
                               for k, v in report.extra_series.items()}
    return out
