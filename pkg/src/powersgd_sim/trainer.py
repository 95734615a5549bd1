"""Error-feedback momentum SGD with PowerSGD / PowerSGD+ compression."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import (
    INIT_STREAM,
    CommAccountant,
    NodeState,
    Schedule,
    make_nodes,
    make_rng,
)
from .compressors import CompressedUpdate, identity_compress, ssp_compress, svd_compress
from .errors import DivergenceError, PreconditionError
from .numkernel import frobenius_sq, matmul
from .problems import ProblemSpec

log = logging.getLogger(__name__)

# Slack for eta written as a decimal literal equal to (1 - mu) / (2L).
ETA_CAP_RTOL = 1e-12


@dataclass(frozen=True)
class Hyper:
    eta: float
    mu: float = 0.0
    tau: int = 1
    rank: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise PreconditionError("eta must be > 0")
        if not 0.0 <= self.mu < 1.0:
            raise PreconditionError("mu must lie in [0, 1)")
        if self.tau < 1:
            raise PreconditionError("tau must be >= 1")
        if self.rank < 1:
            raise PreconditionError("rank must be >= 1")


@dataclass
class TrainerState:
    x: np.ndarray
    momentum: np.ndarray
    q_basis: np.ndarray
    hyper: Hyper
    schedule: Schedule
    step: int = 0
    p_basis: np.ndarray | None = None  # last projection basis, seeds SSP rank completion
    last_update: CompressedUpdate | None = field(default=None, repr=False)
    last_used_svd: bool = False


@dataclass(frozen=True)
class MetricsRow:
    step: int
    loss: float
    grad_sq_norm: float
    comm_floats_cum: int
    compression_err_rel: float
    alignment: float
    ef_norm_sq: float
    # Not part of the CSV schema; feeds the momentum-norm monitor.
    momentum_norm_sq: float = 0.0


CSV_FIELDS = (
    "step",
    "loss",
    "grad_sq_norm",
    "comm_floats_cum",
    "compression_err_rel",
    "alignment",
    "ef_norm_sq",
)


def init_state(problem: ProblemSpec, hyper: Hyper, schedule, master_seed: int) -> TrainerState:
    """Start at ``problem.x0`` with zero momentum and a Gaussian basis.

    The basis is drawn from the seed's init stream and is not orthogonalized.
    """
    schedule = Schedule(schedule)
    if hyper.rank > problem.n:
        raise PreconditionError(f"rank {hyper.rank} exceeds n = {problem.n}")
    q = make_rng(master_seed, INIT_STREAM).standard_normal((problem.n, hyper.rank))
    return TrainerState(
        x=problem.x0.copy(),
        momentum=np.zeros_like(problem.x0),
        q_basis=q,
        hyper=hyper,
        schedule=schedule,
    )


def uses_svd(schedule: Schedule, step: int, tau: int) -> bool:
    return schedule is Schedule.POWERSGD_PLUS and step % tau == 0


def train_step(
    state: TrainerState,
    nodes: list[NodeState],
    problem: ProblemSpec,
    comm: CommAccountant,
    restart_compressor=svd_compress,
) -> tuple[TrainerState, MetricsRow]:
    """One iteration; node residuals are updated in place.

    ``restart_compressor(deltas, rank, comm)`` replaces the SVD step of
    PowerSGD+ and may be any contractive rank-r compressor with that signature.
    """
    if not nodes:
        raise PreconditionError("need at least one node")
    t, hp = state.step, state.hyper
    comm.step = t
    x = state.x

    errors = np.stack([nd.error for nd in nodes])
    grads = np.stack([problem.stoch_grad(x, nd.node_id, nd.rng, t) for nd in nodes])
    deltas = grads + errors

    svd_step = uses_svd(state.schedule, t, hp.tau)
    if state.schedule is Schedule.UNCOMPRESSED:
        upd = identity_compress(deltas, comm, state.q_basis)
    elif svd_step:
        upd = restart_compressor(deltas, hp.rank, comm)
    else:
        upd = ssp_compress(state.q_basis, deltas, comm, p_prev=state.p_basis)

    new_errors = deltas - upd.per_node_approx
    for i, nd in enumerate(nodes):
        nd.error = new_errors[i]

    # Overflow is reported as DivergenceError below, not as a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        momentum, x_next, row = _update_and_record(state, problem, comm, deltas, upd, new_errors)
    if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(momentum))):
        raise DivergenceError(t, [row])
    new_state = replace(
        state,
        x=x_next,
        momentum=momentum,
        q_basis=upd.q_next,
        p_basis=upd.p_tilde if upd.p_tilde is not None else state.p_basis,
        step=t + 1,
        last_update=upd,
        last_used_svd=svd_step,
    )
    return new_state, row


def _update_and_record(state, problem, comm, deltas, upd, new_errors):
    hp = state.hyper
    momentum = hp.mu * state.momentum + upd.global_approx
    x_next = state.x - hp.eta * momentum

    grad = problem.full_grad(state.x)
    grad_sq = frobenius_sq(grad)
    mean_delta = _ordered_mean(deltas)
    delta_sq = frobenius_sq(mean_delta)
    err_rel = frobenius_sq(upd.global_approx - mean_delta) / delta_sq if delta_sq > 0 else 0.0
    if grad_sq == 0.0:
        alignment = 0.0
    elif upd.p_tilde is None:
        alignment = 1.0
    else:
        proj = matmul(upd.p_tilde, matmul(upd.p_tilde.T, grad))
        alignment = math.sqrt(frobenius_sq(proj) / grad_sq)
    row = MetricsRow(
        step=state.step,
        loss=float(problem.loss(state.x)),
        grad_sq_norm=grad_sq,
        comm_floats_cum=comm.per_node_floats,
        compression_err_rel=err_rel,
        alignment=alignment,
        ef_norm_sq=frobenius_sq(_ordered_mean(new_errors)),
        momentum_norm_sq=frobenius_sq(momentum),
    )
    return momentum, x_next, row


def _ordered_mean(mats):
    total = mats[0].copy()
    for mtx in mats[1:]:
        total += mtx
    return total / len(mats)


@dataclass
class RunResult:
    metrics: list[MetricsRow]
    state: TrainerState
    nodes: list[NodeState]
    comm: CommAccountant


def simulate(problem: ProblemSpec, hyper: Hyper, schedule, n_nodes: int, steps: int,
             master_seed: int, callback=None) -> RunResult:
    """Run ``steps`` iterations; ``callback(state, nodes, row)`` sees each step."""
    state = init_state(problem, hyper, schedule, master_seed)
    nodes = make_nodes(n_nodes, problem.m, problem.n, master_seed)
    comm = CommAccountant()
    metrics: list[MetricsRow] = []
    for _ in range(steps):
        try:
            state, row = train_step(state, nodes, problem, comm)
        except DivergenceError as exc:
            raise DivergenceError(exc.step, metrics + exc.metrics) from None
        metrics.append(row)
        if callback is not None:
            callback(state, nodes, row)
    return RunResult(metrics, state, nodes, comm)


def resolve_eta(config, problem: ProblemSpec) -> float:
    """Numeric eta, or the theoretical step size from problem metadata."""
    if config.eta != "theoretical":
        return float(config.eta)
    md = problem.metadata
    delta_f = problem.delta_f()
    if md.L is None or md.sigma is None or md.G_sq is None or delta_f is None:
        raise PreconditionError(f"problem {problem.name!r} lacks metadata for a theoretical eta")
    return theoretical_step_size(
        md.L, md.sigma, config.N, config.T, delta_f, config.tau,
        math.sqrt(md.G_sq), config.r / problem.n, config.mu,
    )


def run(config, problem: ProblemSpec, seed: int | None = None) -> list[MetricsRow]:
    """Execute ``config.T`` steps; ``seed`` overrides ``config.master_seed``."""
    hyper = Hyper(eta=resolve_eta(config, problem), mu=config.mu, tau=config.tau, rank=config.r)
    seed = config.master_seed if seed is None else seed
    return simulate(problem, hyper, config.schedule, config.N, config.T, seed).metrics


def _check_theory_args(L, sigma, N, T, deltaF, tau, G, delta, mu):
    for name, val in (("L", L), ("N", N), ("T", T), ("deltaF", deltaF), ("tau", tau), ("G", G)):
        if not val > 0:
            raise PreconditionError(f"{name} must be positive, got {val}")
    if sigma < 0:
        raise PreconditionError("sigma must be non-negative")
    if not 0 < delta <= 1:
        raise PreconditionError("delta must lie in (0, 1]")
    if not 0 <= mu < 1:
        raise PreconditionError("mu must lie in [0, 1)")


def theoretical_step_size(L, sigma, N, T, deltaF, tau, G, delta, mu) -> float:
    """Step size that balances the three terms of the PowerSGD+ rate."""
    _check_theory_args(L, sigma, N, T, deltaF, tau, G, delta, mu)
    inv = 2 * L / (1 - mu)
    if sigma > 0:
        inv += math.sqrt(L * sigma**2 * T / (2 * (1 - mu) ** 2 * N * deltaF))
    inv += np.cbrt(274 * L**2 * tau**2 * G**2 * T / ((1 - mu) ** 5 * delta**2 * deltaF))
    return 1.0 / inv


def rate_bound_terms(L, sigma, N, T, deltaF, tau, G, delta, mu) -> tuple[float, float, float]:
    """Noise, deterministic and compression terms of the T-averaged bound."""
    _check_theory_args(L, sigma, N, T, deltaF, tau, G, delta, mu)
    noise = math.sqrt(32 * L * sigma**2 * deltaF / (N * T))
    det = 8 * L * deltaF / T
    comp = 6 * np.cbrt(274) * (L * tau * G * deltaF) ** (2 / 3) / (
        T ** (2 / 3) * delta ** (2 / 3) * (1 - mu) ** (2 / 3)
    )
    return noise, det, float(comp)


def theoretical_rate_bound(L, sigma, N, T, deltaF, tau, G, delta, mu) -> float:
    return sum(rate_bound_terms(L, sigma, N, T, deltaF, tau, G, delta, mu))


def rate_bound_at_eta(eta, L, sigma, N, T, deltaF, tau, G, delta, mu) -> float:
    """T-averaged bound for an arbitrary eta <= (1 - mu) / (2L)."""
    _check_theory_args(L, sigma, N, T, deltaF, tau, G, delta, mu)
    if not 0 < eta <= (1 - mu) / (2 * L) * (1 + ETA_CAP_RTOL):
        raise PreconditionError("eta must lie in (0, (1 - mu) / (2L)]")
    return (
        4 * (1 - mu) * deltaF / (eta * T)
        + 2 * L * eta * sigma**2 / ((1 - mu) * N)
        + 548 * L**2 * eta**2 * tau**2 * G**2 / ((1 - mu) ** 4 * delta**2)
    )


def ef_bound(tau, G_sq, delta) -> float:
    """Bound on ||mean_i e_t^(i)||^2 under periodic optimal restarts."""
    return 45 * tau**2 * G_sq / delta**2


def momentum_bound(tau, G_sq, delta, mu) -> float:
    """Bound on ||m_t||^2 under periodic optimal restarts."""
    return 92 * tau**2 * G_sq / ((1 - mu) ** 2 * delta**2)


def monitor_window(schedule, tau: int, steps: int) -> int | None:
    """Restart window used by the residual/momentum monitors.

    PowerSGD never restarts; over a finite horizon its iterates obey the same
    recursion as a single window of length ``steps``. Uncompressed runs carry
    no residual and are not monitored.
    """
    schedule = Schedule(schedule)
    if schedule is Schedule.POWERSGD_PLUS:
        return tau
    if schedule is Schedule.POWERSGD:
        return max(steps, 1)
    return None
