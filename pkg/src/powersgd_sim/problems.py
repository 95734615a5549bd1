"""Optimization problems with full and per-node stochastic gradient oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cluster import PROBE_STREAM, make_rng
from .errors import PreconditionError
from .numkernel import as_matrix, frobenius_sq

A = np.array([[1.0, -1.0], [-1.0, 1.0]])
B = np.array([[1.0, 1.0], [1.0, 1.0]])
C = np.array([[math.sqrt(2) / 2], [math.sqrt(2) / 2]])
D = np.array([[1.0], [-1.0]])


@dataclass(frozen=True)
class ProblemMetadata:
    """Analytic constants; ``None`` where a constant is unknown or unbounded.

    ``sigma`` bounds the per-node oracle deviation ``E||g - grad f||^2 <= sigma^2``
    and ``G_sq`` bounds the second moment of the node-averaged oracle.
    """

    L: float | None = None
    sigma: float | None = None
    G_sq: float | None = None
    f_min: float | None = None


class ProblemSpec:
    """Base class: ``loss``, ``full_grad`` and the per-node oracle ``stoch_grad``.

    ``stoch_grad`` takes the step index so oracle overrides can depend on it;
    the draw consumed from ``rng`` never does.
    """

    name = "problem"

    def __init__(self, m: int, n: int, x0, metadata: ProblemMetadata):
        self.m, self.n = m, n
        self.x0 = as_matrix(x0)
        if self.x0.shape != (m, n):
            raise PreconditionError(f"x0 must be {m}x{n}, got {self.x0.shape}")
        self.metadata = metadata

    def loss(self, x) -> float:
        raise NotImplementedError

    def full_grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def stoch_grad(self, x, node_id: int, rng: np.random.Generator, step: int = 0) -> np.ndarray:
        raise NotImplementedError

    def delta_f(self) -> float | None:
        if self.metadata.f_min is None:
            return None
        return self.loss(self.x0) - self.metadata.f_min


def psi(x: float) -> float:
    """x^2 on [-1, 1], 2|x| - 1 outside; C^1 at the joins."""
    ax = abs(x)
    return x * x if ax <= 1.0 else 2.0 * ax - 1.0


def psi_prime(x: float) -> float:
    if abs(x) <= 1.0:
        return 2.0 * x
    return 2.0 if x > 0 else -2.0


def _s(x) -> float:
    # D^T X D for D = [1, -1]
    return x[0, 0] - x[0, 1] - x[1, 0] + x[1, 1]


def counterexample_full_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return psi_prime(_s(x)) * A


def counterexample_stoch_grad(x, sigma: float, xi: float) -> np.ndarray:
    """grad f(X) + xi (sigma B - grad f(X)) for a given sign ``xi``.

    Evaluated as ``(1 - xi) grad f + xi sigma B`` so that xi = +1 returns
    ``sigma B`` exactly; the literal form can leave last-bit asymmetries.
    """
    g = counterexample_full_grad(x)
    return (1.0 - xi) * g + xi * (sigma * B)


def epsilon_zero(x0, n_nodes: int) -> float:
    """Lower bound psi'(a - b - c + d)^2 / 2^(N - 2) on E||grad f(X_t)||^2."""
    if n_nodes < 1:
        raise PreconditionError("need N >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    return psi_prime(_s(x0)) ** 2 / 2.0 ** (n_nodes - 2)


class CounterexampleProblem(ProblemSpec):
    """f_i(X) = psi(D^T X D) on 2x2 matrices, identical on every node.

    The oracle returns ``sigma B`` or ``2 grad f - sigma B`` with equal
    probability. With ``force_xi0`` every node's step-0 sign is overridden to
    +1 after its draw is consumed, so later draws match the unforced run.

    Constants: grad f = psi'(s) A with ``|psi'| <= 2`` and ``||A||_F = 2`` gives
    ``||grad f||^2 <= 16`` and smoothness ``L = ||A||_F^2 sup psi'' = 8``. The
    oracle deviation is ``||sigma B - grad f||^2 = 4 sigma^2 + ||grad f||^2``
    (B and A are orthogonal), at most ``4 sigma^2 + 16``; so
    ``G^2 = sigma_oracle^2 + omega^2 = 4 sigma^2 + 32``.
    """

    name = "counterexample"

    def __init__(self, sigma: float = 1.0, x0=None, force_xi0: bool = False):
        if sigma < 0:
            raise PreconditionError("sigma must be >= 0")
        self.sigma = float(sigma)
        self.force_xi0 = bool(force_xi0)
        meta = ProblemMetadata(
            L=8.0,
            sigma=math.sqrt(4 * sigma**2 + 16),
            G_sq=4 * sigma**2 + 32,
            f_min=0.0,
        )
        super().__init__(2, 2, np.eye(2) if x0 is None else x0, meta)

    def loss(self, x) -> float:
        return psi(_s(np.asarray(x)))

    def full_grad(self, x) -> np.ndarray:
        return counterexample_full_grad(x)

    def draw_xi(self, rng, step: int) -> float:
        xi = 1.0 if rng.integers(0, 2) == 1 else -1.0
        if self.force_xi0 and step == 0:
            return 1.0
        return xi

    def stoch_grad(self, x, node_id, rng, step=0):
        return counterexample_stoch_grad(x, self.sigma, self.draw_xi(rng, step))


class QuadraticProblem(ProblemSpec):
    """0.5 ||X - target||_F^2 with additive Gaussian oracle noise.

    Entrywise noise standard deviation is ``noise_sigma / sqrt(mn)`` so that
    ``E||noise||_F^2 = noise_sigma^2``. The gradient is not globally bounded,
    so ``G_sq`` is left unset.
    """

    name = "quadratic"

    def __init__(self, m, n, target, noise_sigma: float = 0.0, x0=None):
        self.target = as_matrix(target)
        if self.target.shape != (m, n):
            raise PreconditionError(f"target must be {m}x{n}, got {self.target.shape}")
        if noise_sigma < 0:
            raise PreconditionError("noise_sigma must be >= 0")
        self.noise_sigma = float(noise_sigma)
        self._entry_sd = noise_sigma / math.sqrt(m * n)
        meta = ProblemMetadata(L=1.0, sigma=self.noise_sigma, G_sq=None, f_min=0.0)
        super().__init__(m, n, np.zeros((m, n)) if x0 is None else x0, meta)

    def loss(self, x) -> float:
        return 0.5 * frobenius_sq(np.asarray(x) - self.target)

    def full_grad(self, x):
        return np.asarray(x, dtype=np.float64) - self.target

    def stoch_grad(self, x, node_id, rng, step=0):
        noise = rng.standard_normal((self.m, self.n))
        if self.noise_sigma == 0.0:
            return self.full_grad(x)
        return self.full_grad(x) + self._entry_sd * noise


def quadratic_problem(m: int, n: int, target, noise_sigma: float = 0.0, x0=None) -> QuadraticProblem:
    return QuadraticProblem(m, n, target, noise_sigma, x0)


def oracle_mean_variance(problem: ProblemSpec, x, n_nodes: int, samples: int, seed: int) -> float:
    """Monte Carlo estimate of E||(1/N) sum_i g_i - grad f(x)||^2.

    Uses a dedicated probe stream so training trajectories are unaffected.
    """
    rng = make_rng(seed, PROBE_STREAM, n_nodes)
    grad = problem.full_grad(x)
    acc = 0.0
    for _ in range(samples):
        g = sum(problem.stoch_grad(x, i, rng, step=-1) for i in range(n_nodes)) / n_nodes
        acc += frobenius_sq(g - grad)
    return acc / samples
