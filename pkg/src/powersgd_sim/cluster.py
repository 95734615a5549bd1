"""Simulated N-node cluster: RNG streams, ordered all-reduce, comm accounting.

Random streams are numpy ``PCG64`` generators seeded through
``SeedSequence(master_seed, spawn_key=(NODE_STREAM, node_id))``. A stream
therefore depends only on ``(master_seed, node_id)`` and the number of draws
taken from it. The shared initial basis uses ``spawn_key=(INIT_STREAM,)``.
"""
from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError

NODE_STREAM = 0
INIT_STREAM = 1
PROBE_STREAM = 2


class Schedule(str, enum.Enum):
    POWERSGD = "powersgd"
    POWERSGD_PLUS = "powersgd_plus"
    UNCOMPRESSED = "uncompressed"


def make_rng(master_seed: int, *stream) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class CommEvent:
    step: int
    tag: str
    elements: int


class CommAccountant:
    """Per-node count of floats sent through all-reduce.

    One all-reduce of a d-element tensor charges d floats. Increments are
    serialized with a lock so node-parallel callers stay consistent.
    """

    def __init__(self, record_events: bool = True):
        self.per_node_floats = 0
        self.events: list[CommEvent] | None = [] if record_events else None
        self.step = 0
        self._lock = threading.Lock()

    def charge(self, elements: int, tag: str) -> None:
        if elements < 0:
            raise PreconditionError("cannot charge a negative element count")
        with self._lock:
            self.per_node_floats += int(elements)
            if self.events is not None:
                self.events.append(CommEvent(self.step, tag, int(elements)))


@dataclass
class NodeState:
    node_id: int
    error: np.ndarray
    rng: np.random.Generator = field(repr=False)


def make_nodes(n_nodes: int, m: int, n: int, master_seed: int) -> list[NodeState]:
    if n_nodes < 1:
        raise PreconditionError("need at least one node")
    return [
        NodeState(i, np.zeros((m, n)), make_rng(master_seed, NODE_STREAM, i))
        for i in range(n_nodes)
    ]


def all_reduce_mean(tensors, comm: CommAccountant | None, tag: str = "") -> np.ndarray:
    """Mean over nodes, summed in ascending node order for bit reproducibility.

    ``tensors`` is a sequence of equally shaped arrays or one stacked array
    whose first axis indexes nodes.
    """
    if len(tensors) < 1:
        raise PreconditionError("all_reduce_mean needs at least one tensor")
    shape = np.shape(tensors[0])
    total = np.array(tensors[0], dtype=np.float64, copy=True)
    for t in tensors[1:]:
        if np.shape(t) != shape:
            raise PreconditionError(f"all_reduce_mean shape mismatch: {np.shape(t)} vs {shape}")
        total += t
    if comm is not None:
        comm.charge(total.size, tag)
    return total / len(tensors)


def _schedule(kind) -> Schedule:
    # Compressor kind names map onto the schedule that uses them every step.
    name = getattr(kind, "value", kind)
    aliases = {"ssp": "powersgd", "svd": "powersgd_plus", "identity": "uncompressed",
               "powersgd+": "powersgd_plus"}
    name = aliases.get(str(name).lower(), str(name).lower())
    try:
        return Schedule(name)
    except ValueError:
        raise PreconditionError(f"unknown schedule {kind!r}") from None


def _check_dims(m, n, r, tau):
    if not (m >= n >= r >= 1):
        raise PreconditionError(f"need m >= n >= r >= 1, got m={m}, n={n}, r={r}")
    if tau < 1:
        raise PreconditionError("tau must be >= 1")


def expected_comm_per_iteration(kind, m: int, n: int, r: int, tau: int = 1) -> float:
    """Average floats per node per iteration, derived from the compressor steps.

    PowerSGD: ``mr + nr``. PowerSGD+: one SVD step (``mn + nr``) and
    ``tau - 1`` power steps per period. Uncompressed: ``mn``.
    """
    _check_dims(m, n, r, tau)
    sched = _schedule(kind)
    ssp = m * r + n * r
    if sched is Schedule.POWERSGD:
        return float(ssp)
    if sched is Schedule.UNCOMPRESSED:
        return float(m * n)
    return ((tau - 1) * ssp + (m * n + n * r)) / tau


def simplified_comm_per_iteration(kind, m: int, n: int, r: int, tau: int = 1) -> float:
    """The per-iteration figure as tabulated (``nr + mr + mn/tau`` for PowerSGD+)."""
    _check_dims(m, n, r, tau)
    sched = _schedule(kind)
    if sched is Schedule.POWERSGD:
        return float(m * r + n * r)
    if sched is Schedule.UNCOMPRESSED:
        return float(m * n)
    return n * r + m * r + m * n / tau


def expected_comm_total(kind, m: int, n: int, r: int, tau: int, steps: int) -> int:
    """Exact floats per node after ``steps`` iterations (SVD at t % tau == 0)."""
    _check_dims(m, n, r, tau)
    sched = _schedule(kind)
    ssp = m * r + n * r
    if sched is Schedule.POWERSGD:
        return steps * ssp
    if sched is Schedule.UNCOMPRESSED:
        return steps * m * n
    restarts = math.ceil(steps / tau)
    return restarts * (m * n + n * r) + (steps - restarts) * ssp
