"""Rank-r compressors applied jointly to the N per-node update matrices.

Each compressor returns the new auxiliary basis, the per-node approximations
``p_tilde @ q_i.T`` and the global approximation ``p_tilde @ q.T``. The
``ssp_compress`` and ``svd_compress`` functions communicate only through
``all_reduce_mean``, which charges the accountant.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cluster import CommAccountant, all_reduce_mean, make_rng
from .errors import PreconditionError
from .numkernel import as_matrix, frobenius_sq, matmul, qr_economic, thin_svd


@dataclass
class CompressedUpdate:
    q_next: np.ndarray
    per_node_approx: np.ndarray  # (N, m, n); row i is node i's approximation
    global_approx: np.ndarray
    p_tilde: np.ndarray | None
    # All-reduced P = mean(delta_i @ q_prev) before orthogonalization (SSP only).
    p_mean: np.ndarray | None = None


class Kind(str, enum.Enum):
    SSP = "ssp"
    SVD = "svd"
    IDENTITY = "identity"


@dataclass(frozen=True)
class CompressorKind:
    kind: Kind
    rank: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.rank < 1:
            raise PreconditionError("rank must be positive")


def _check_deltas(deltas) -> np.ndarray:
    """Stack node deltas into an (N, m, n) float64 array."""
    try:
        arr = np.asarray(deltas, dtype=np.float64)
    except ValueError:
        raise PreconditionError("node deltas must all have the same shape") from None
    if arr.ndim != 3 or arr.shape[0] < 1:
        raise PreconditionError(f"expected N >= 1 matrices of equal shape, got array of shape {arr.shape}")
    if arr.shape[1] < arr.shape[2]:
        raise PreconditionError(f"deltas must have rows >= cols, got {arr.shape[1:]}")
    return arr


def _finish(p_tilde, deltas, comm, p_mean=None) -> CompressedUpdate:
    q_nodes = matmul(deltas.transpose(0, 2, 1), p_tilde)
    q = all_reduce_mean(q_nodes, comm, "Q")
    per_node = matmul(p_tilde, q_nodes.transpose(0, 2, 1))
    return CompressedUpdate(q, per_node, matmul(p_tilde, q.T), p_tilde, p_mean)


def ssp_compress(q_prev, deltas, comm: CommAccountant | None, p_prev=None) -> CompressedUpdate:
    """One warm-started power step: ``P~ = QR(mean_i delta_i q_prev)``.

    When the all-reduced ``P`` loses rank (for instance ``P = 0``), the missing
    directions are completed from ``p_prev``, the previous projection basis,
    before falling back to canonical vectors. Every node holds ``p_prev``, so
    this costs no communication.
    """
    deltas = _check_deltas(deltas)
    q_prev = as_matrix(q_prev)
    n = deltas.shape[2]
    if q_prev.shape[0] != n or q_prev.shape[1] > n:
        raise PreconditionError(f"q_prev must be {n} x r with r <= {n}, got {q_prev.shape}")
    p = all_reduce_mean(matmul(deltas, q_prev), comm, "P")
    return _finish(qr_economic(p, fallback=p_prev), deltas, comm, p_mean=p)


def svd_compress(deltas, rank: int, comm: CommAccountant | None) -> CompressedUpdate:
    """Optimal rank-r projection from the top left singular vectors of the mean."""
    deltas = _check_deltas(deltas)
    n = deltas.shape[2]
    if not 1 <= rank <= n:
        raise PreconditionError(f"rank must be in [1, {n}], got {rank}")
    mean = all_reduce_mean(deltas, comm, "Delta")
    p_tilde = np.ascontiguousarray(thin_svd(mean).u[:, :rank])
    return _finish(p_tilde, deltas, comm)


def identity_compress(deltas, comm: CommAccountant | None, q_prev=None) -> CompressedUpdate:
    """Uncompressed all-reduce; the basis is passed through untouched."""
    deltas = _check_deltas(deltas)
    mean = all_reduce_mean(deltas, comm, "Delta")
    return CompressedUpdate(q_prev, deltas.copy(), mean, None)


def compress(kind: CompressorKind, w, q_prev=None, comm=None) -> np.ndarray:
    """Apply a single-node compressor to ``w`` and return C(w)."""
    if kind.kind is Kind.SSP:
        return ssp_compress(q_prev, [w], comm).global_approx
    if kind.kind is Kind.SVD:
        return svd_compress([w], kind.rank, comm).global_approx
    return identity_compress([w], comm).global_approx


def compression_error_ratio(approx, w) -> float:
    """||C(w) - w||^2 / ||w||^2, zero for w = 0."""
    denom = frobenius_sq(w)
    if denom == 0.0:
        return 0.0
    return frobenius_sq(np.asarray(approx) - w) / denom


def contractive_check(c: CompressorKind, w, trials: int = 1, *, q_prev=None, seed: int = 0) -> dict:
    """Largest observed ``||C(w) - w||^2 / ||w||^2`` over ``trials`` runs.

    SVD and identity kinds are deterministic, so extra trials repeat the same
    value. For SSP each trial draws a fresh Gaussian ``q_prev`` from ``seed``
    unless an explicit ``q_prev`` is given.
    """
    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    w = as_matrix(w)
    if frobenius_sq(w) == 0.0:
        return {"max_ratio": 0.0}
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(trials):
        q = q_prev
        if c.kind is Kind.SSP and q is None:
            q = rng.standard_normal((w.shape[1], c.rank))
        worst = max(worst, compression_error_ratio(compress(c, w, q), w))
    return {"max_ratio": worst}
