"""Dense float64 kernels: economic QR, thin SVD, Frobenius norms.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The
functions here never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, PreconditionError

# Relative threshold under which a Gram-Schmidt residual counts as rank loss.
RANK_TOL = 1e-12


def as_matrix(a, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array, rejecting NaN/Inf entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PreconditionError(f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise PreconditionError("matrix contains non-finite entries")
    return arr


def frobenius_sq(a) -> float:
    """Sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.square(a).sum())


def matmul(a, b) -> np.ndarray:
    """Matrix product accumulated over the inner index in ascending order.

    Each term is a separately rounded multiply followed by an add, so results
    do not depend on the BLAS build, thread count or FMA contraction. This
    also keeps exact symmetries exact: for ``a = [[x, y], [y, x]]`` both
    entries of ``a @ [c, c]`` are bit-identical. Leading batch dimensions
    broadcast as in ``numpy.matmul``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    if a.shape[-1] != b.shape[-2]:
        raise PreconditionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    inner = a.shape[-1]
    if inner == 0:
        shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
        out = np.zeros(shape)
    else:
        out = a[..., :, 0:1] * b[..., 0:1, :]
        for k in range(1, inner):
            out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out[..., 0] if vec else out


def _scaled_norm(v: np.ndarray) -> float:
    # Rescale by the largest entry so tiny or huge inputs neither underflow nor overflow.
    s = float(np.max(np.abs(v))) if v.size else 0.0
    if s == 0.0:
        return 0.0
    return s * float(np.sqrt(np.square(v / s).sum()))


def _orthogonalize(v: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Two classical Gram-Schmidt passes keep the loss of orthogonality at
    # roundoff level regardless of conditioning.
    for _ in range(2):
        v = v - matmul(q, matmul(q.T, v))
    return v


def _completion_candidates(m: int, fallback):
    if fallback is not None:
        fb = as_matrix(fallback)
        if fb.shape[0] != m:
            raise PreconditionError(f"fallback basis must have {m} rows, got {fb.shape}")
        for j in range(fb.shape[1]):
            yield fb[:, j]
    for idx in range(m):
        e = np.zeros(m)
        e[idx] = 1.0
        yield e


def qr_economic(a, fallback=None) -> np.ndarray:
    """Orthonormal factor of the economic QR decomposition of ``a``.

    The implied triangular factor has a non-negative diagonal. A column whose
    residual against the preceding columns drops below ``RANK_TOL * ||a||_F``
    is replaced by the first completion candidate that still has a substantial
    component (at least ``1/(2 sqrt(m))``) outside the current span. Candidates
    are the columns of ``fallback`` (if given), then the canonical basis
    vectors in index order; a canonical vector always qualifies, so the result
    is semi-orthogonal for any input, including the zero matrix.
    """
    a = as_matrix(a)
    m, k = a.shape
    if m < k:
        raise PreconditionError(f"qr_economic needs rows >= cols, got {a.shape}")
    tol = RANK_TOL * _scaled_norm(a)
    floor = 0.5 / np.sqrt(m)
    q = np.zeros((m, k))
    for j in range(k):
        basis = q[:, :j]
        v = _orthogonalize(a[:, j], basis)
        norm = _scaled_norm(v)
        if norm <= tol:
            for cand in _completion_candidates(m, fallback):
                v = _orthogonalize(cand, basis)
                norm = _scaled_norm(v)
                if norm >= floor:
                    break
        w = v / np.max(np.abs(v))
        q[:, j] = w / np.sqrt(np.square(w).sum())
    return q


@dataclass(frozen=True)
class ThinSvd:
    u: np.ndarray  # m x n, orthonormal columns
    sigma: np.ndarray  # n, non-increasing
    v: np.ndarray  # n x n, orthogonal

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


def thin_svd(a) -> ThinSvd:
    """Thin SVD with a deterministic sign convention.

    In every column of ``u`` the entry of largest magnitude (lowest row index
    on ties) is made non-negative; the matching column of ``v`` is flipped
    along with it so the product is unchanged.
    """
    a = as_matrix(a)
    m, n = a.shape
    if m < n:
        raise PreconditionError(f"thin_svd needs rows >= cols, got {a.shape}")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge for {m}x{n} input: {exc}") from exc
    v = vh.T.copy()
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(n)] < 0, -1.0, 1.0)
    u = u * signs
    v = v * signs
    return ThinSvd(u=u, sigma=s, v=v)


def projector(p: np.ndarray) -> np.ndarray:
    """P P^T for a semi-orthogonal ``p``."""
    return p @ p.T
