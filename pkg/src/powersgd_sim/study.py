"""Multi-trial studies: run trials, write metrics CSVs, summarize against bounds."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import Schedule, expected_comm_total, simplified_comm_per_iteration
from .config import RunConfig, build_problem
from .errors import ConfigError, DivergenceError, PreconditionError
from .problems import epsilon_zero, oracle_mean_variance
from .trainer import (
    CSV_FIELDS,
    ETA_CAP_RTOL,
    Hyper,
    MetricsRow,
    ef_bound,
    momentum_bound,
    monitor_window,
    rate_bound_at_eta,
    resolve_eta,
    simulate,
)

log = logging.getLogger(__name__)

Z95 = 1.96

CHECKS = ("nonconvergence", "convergence", "rate_bound", "residual_monitor", "momentum_monitor", "comm")
# How observed is compared with bound; drives the margin sign in reports.
CHECK_SENSE = {"nonconvergence": ">=", "comm": "=="}

CONFIG_COLUMNS = ("problem", "schedule", "N", "m", "n", "r", "tau", "eta", "mu", "T",
                  "trials", "master_seed", "sigma", "noise_sigma", "force_xi0_ones")
STAT_COLUMNS = ("eta_resolved", "mean_grad_sq_final", "ci_half_width", "mean_grad_sq_timeavg",
                "mean_grad_sq_tail", "epsilon_zero", "comm_total", "comm_simplified", "oracle_mean_var")
SUMMARY_FIELDS = (
    ("cell",) + CONFIG_COLUMNS + STAT_COLUMNS
    + tuple(f"{c}_{k}" for c in CHECKS for k in ("status", "observed", "bound", "detail"))
)


def fmt(x) -> str:
    """17 significant digits, enough to round-trip any float64."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_FIELDS) + "\n")
    for row in rows:
        buf.write(",".join(fmt(getattr(row, name)) for name in CSV_FIELDS) + "\n")
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def trial_csv_path(out_dir, k: int) -> Path:
    return Path(out_dir) / f"trial_{k:04d}.csv"


@dataclass(frozen=True)
class Verdict:
    name: str
    status: str  # "pass", "fail" or "na"
    observed: float = math.nan
    bound: float = math.nan
    detail: str = ""

    @property
    def margin(self) -> float:
        sense = CHECK_SENSE.get(self.name, "<=")
        if sense == ">=":
            return self.observed - self.bound
        if sense == "==":
            return -abs(self.observed - self.bound) + 0.0
        return self.bound - self.observed


@dataclass
class TrialOutcome:
    index: int
    seed: int
    metrics: list[MetricsRow]
    comm_total: int
    diverged_at: int | None = None


@dataclass
class StudySummary:
    config: RunConfig
    eta: float
    trials: int
    mean_grad_sq_final: float
    ci_half_width: float
    mean_grad_sq_timeavg: float
    mean_grad_sq_tail: float
    epsilon_zero: float | None
    comm_total: int
    comm_simplified: float
    oracle_mean_var: float | None
    verdicts: list[Verdict] = field(default_factory=list)

    def verdict(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(v.status != "fail" for v in self.verdicts)

    def row(self, cell: int = 0) -> dict:
        out = {"cell": str(cell)}
        cfg = self.config
        for name in CONFIG_COLUMNS:
            val = getattr(cfg, name)
            out[name] = val if isinstance(val, str) else fmt(val)
        stats = {
            "eta_resolved": self.eta,
            "mean_grad_sq_final": self.mean_grad_sq_final,
            "ci_half_width": self.ci_half_width,
            "mean_grad_sq_timeavg": self.mean_grad_sq_timeavg,
            "mean_grad_sq_tail": self.mean_grad_sq_tail,
            "epsilon_zero": self.epsilon_zero,
            "comm_total": self.comm_total,
            "comm_simplified": self.comm_simplified,
            "oracle_mean_var": self.oracle_mean_var,
        }
        out.update({k: fmt(v) for k, v in stats.items()})
        for c in CHECKS:
            v = next((v for v in self.verdicts if v.name == c), Verdict(c, "na", detail="not evaluated"))
            out[f"{c}_status"] = v.status
            out[f"{c}_observed"] = fmt(v.observed)
            out[f"{c}_bound"] = fmt(v.bound)
            out[f"{c}_detail"] = v.detail
        return out


class StudyDivergence(DivergenceError):
    def __init__(self, trial: int, step: int, metrics=None):
        super().__init__(step, metrics)
        self.trial = trial


def run_trial(config: RunConfig, eta: float, index: int) -> TrialOutcome:
    """Trial ``index`` uses master seed ``config.master_seed + index``."""
    problem = build_problem(config)
    hyper = Hyper(eta=eta, mu=config.mu, tau=config.tau, rank=config.r)
    seed = config.master_seed + index
    try:
        res = simulate(problem, hyper, config.schedule, config.N, config.T, seed)
    except DivergenceError as exc:
        return TrialOutcome(index, seed, list(exc.metrics or []), -1, exc.step)
    return TrialOutcome(index, seed, res.metrics, res.comm.per_node_floats)


def _run_trial_args(args) -> TrialOutcome:
    return run_trial(*args)


def resolve_config_eta(config: RunConfig) -> float:
    try:
        return resolve_eta(config, build_problem(config))
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from None


def run_trials(config: RunConfig, out_dir=None) -> tuple[float, list[TrialOutcome]]:
    """Run every trial; CSVs are written in trial order by this collector.

    Raises ``StudyDivergence`` at the first diverged trial after writing its
    partial CSV and those of all earlier trials.
    """
    eta = resolve_config_eta(config)
    jobs = [(config, eta, k) for k in range(config.trials)]
    if config.workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = pool.map(_run_trial_args, jobs)
            collected = _collect(outcomes, out_dir)
    else:
        collected = _collect(map(_run_trial_args, jobs), out_dir)
    return eta, collected


def _collect(outcomes, out_dir) -> list[TrialOutcome]:
    done = []
    for oc in outcomes:
        if out_dir is not None:
            write_text(trial_csv_path(out_dir, oc.index), metrics_csv(oc.metrics))
        if oc.diverged_at is not None:
            raise StudyDivergence(oc.index, oc.diverged_at, oc.metrics)
        done.append(oc)
    return done


def run_study(config: RunConfig, out_dir=None) -> StudySummary:
    eta, outcomes = run_trials(config, out_dir)
    return summarize(config, eta, outcomes)


def _first_violation(outcomes, attr, bound):
    worst, where = -math.inf, None
    for oc in outcomes:
        for row in oc.metrics:
            val = getattr(row, attr)
            if val > bound:
                return val, f"violated at trial {oc.index} step {row.step}: {val:.6g} > {bound:.6g}", True
            if val > worst:
                worst, where = val, (oc.index, row.step)
    detail = f"max at trial {where[0]} step {where[1]}" if where else ""
    return worst, detail, False


def summarize(config: RunConfig, eta: float, outcomes: list[TrialOutcome]) -> StudySummary:
    if not outcomes or any(not oc.metrics for oc in outcomes):
        raise PreconditionError("every trial needs at least one metrics row")
    problem = build_problem(config)
    md = problem.metadata
    sched = config.schedule_kind
    grads = np.array([[row.grad_sq_norm for row in oc.metrics] for oc in outcomes])
    finals = grads[:, -1]
    trials = len(outcomes)
    mean_final = float(np.mean(finals))
    half = Z95 * float(np.std(finals, ddof=1)) / math.sqrt(trials) if trials >= 2 else math.nan
    timeavg = float(np.mean(np.mean(grads, axis=1)))
    tail = float(np.mean(np.mean(grads[:, -min(config.tail, grads.shape[1]):], axis=1)))
    eps0 = epsilon_zero(problem.x0, config.N) if config.problem == "counterexample" else None

    comm_totals = {oc.comm_total for oc in outcomes}
    comm_total = outcomes[0].comm_total
    simplified = simplified_comm_per_iteration(sched, config.m, config.n, config.r, config.tau) * config.T
    oracle_var = None
    if config.oracle_samples > 0:
        oracle_var = oracle_mean_variance(problem, problem.x0, config.N, config.oracle_samples,
                                          config.master_seed)

    verdicts = []
    # Non-convergence lower bound for PowerSGD on the counterexample.
    if sched is Schedule.POWERSGD and eps0 is not None:
        if trials < 2:
            verdicts.append(Verdict("nonconvergence", "na", detail="needs trials >= 2"))
        else:
            lcb = mean_final - half
            verdicts.append(Verdict(
                "nonconvergence", "pass" if lcb >= eps0 else "fail", lcb, eps0,
                f"95% lower bound of mean final grad_sq; mean={mean_final:.6g} "
                f"half_width={half:.6g}",
            ))
    else:
        verdicts.append(Verdict("nonconvergence", "na", detail="applies to powersgd on the counterexample"))

    tol = config.converge_tol
    if tol is None and eps0 is not None:
        tol = 0.1 * eps0
    if sched is not Schedule.POWERSGD and tol is not None:
        verdicts.append(Verdict(
            "convergence", "pass" if tail <= tol else "fail", tail, tol,
            f"mean grad_sq over the last {min(config.tail, grads.shape[1])} steps",
        ))
    else:
        verdicts.append(Verdict("convergence", "na", detail="no tolerance for this schedule/problem"))

    eta_cap = None if md.L is None else (1 - config.mu) / (2 * md.L) * (1 + ETA_CAP_RTOL)
    delta = config.r / config.n
    if sched is not Schedule.POWERSGD_PLUS:
        verdicts.append(Verdict("rate_bound", "na", detail="applies to powersgd_plus"))
    elif md.G_sq is None or md.sigma is None or md.L is None:
        verdicts.append(Verdict("rate_bound", "na", detail="problem lacks L, sigma or G metadata"))
    elif eta > eta_cap:
        verdicts.append(Verdict("rate_bound", "na", detail=f"eta {eta:.6g} exceeds (1-mu)/(2L) = {eta_cap:.6g}"))
    else:
        bound = rate_bound_at_eta(eta, md.L, md.sigma, config.N, config.T, problem.delta_f(),
                                  config.tau, math.sqrt(md.G_sq), delta, config.mu)
        verdicts.append(Verdict("rate_bound", "pass" if timeavg <= bound else "fail", timeavg, bound,
                                "T-averaged mean grad_sq"))

    window = monitor_window(sched, config.tau, config.T)
    for name, attr in (("residual_monitor", "ef_norm_sq"), ("momentum_monitor", "momentum_norm_sq")):
        if window is None:
            verdicts.append(Verdict(name, "na", detail="no compression residual"))
            continue
        if md.G_sq is None:
            log.warning("%s monitor skipped: problem %r has no gradient bound G", name, config.problem)
            verdicts.append(Verdict(name, "na", detail="problem has no gradient bound G"))
            continue
        if name == "residual_monitor":
            bound = ef_bound(window, md.G_sq, delta)
        else:
            bound = momentum_bound(window, md.G_sq, delta, config.mu)
        observed, detail, violated = _first_violation(outcomes, attr, bound)
        verdicts.append(Verdict(name, "fail" if violated else "pass", observed, bound,
                                f"window={window}; {detail}"))

    expected = expected_comm_total(sched, config.m, config.n, config.r, config.tau, config.T)
    ok = len(comm_totals) == 1 and comm_total == expected
    verdicts.append(Verdict("comm", "pass" if ok else "fail", comm_total, expected,
                            f"floats per node; per-iteration simplified figure x T = {simplified:.6g}"))

    return StudySummary(
        config=config, eta=eta, trials=trials, mean_grad_sq_final=mean_final,
        ci_half_width=half, mean_grad_sq_timeavg=timeavg, mean_grad_sq_tail=tail,
        epsilon_zero=eps0, comm_total=comm_total, comm_simplified=simplified,
        oracle_mean_var=oracle_var, verdicts=verdicts,
    )


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def read_summary_csv(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SUMMARY_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ConfigError(f"{path} is not a summary CSV; missing {sorted(missing)[:3]}")
            rows = list(reader)
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise ConfigError(f"cannot read summary {path}: {exc}") from None
    for i, row in enumerate(rows):
        if None in row or any(v is None for v in row.values()):
            raise ConfigError(f"{path}: row {i + 1} has the wrong number of fields")
        for c in CHECKS:
            if row[f"{c}_status"] not in ("pass", "fail", "na"):
                raise ConfigError(f"{path}: row {i + 1} has bad status for {c}")
    return rows
