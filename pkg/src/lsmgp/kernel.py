"""Squared-exponential ARD covariance.

    k(x, x') = variance * exp(-sum_d (x_d - x'_d)^2 / (2 l_d^2))

Hyperparameters are optimized in log-space; :func:`grad_contract` returns
gradients with respect to ``log(variance)`` and ``log(length_scales)``.
The jitter is an absolute quantity and is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist


class ConditioningError(np.linalg.LinAlgError):
    """A matrix that should be positive definite could not be factorized."""


@dataclass
class KernelConfig:
    variance: float
    length_scales: np.ndarray
    jitter: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.variance = float(self.variance)
        self.length_scales = np.atleast_1d(np.asarray(self.length_scales, dtype=float)).copy()
        if self.jitter is None:
            self.jitter = 1e-5 * self.variance
        self.jitter = float(self.jitter)
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if self.length_scales.ndim != 1 or not np.all(self.length_scales > 0):
            raise ValueError("length_scales must be a vector of positive reals")
        if not self.jitter > 0:
            raise ValueError(f"jitter must be positive, got {self.jitter}")

    @property
    def dim(self) -> int:
        return self.length_scales.size

    @classmethod
    def from_data(cls, X: np.ndarray, variance: float = 1.0, jitter: float | None = None) -> "KernelConfig":
        return cls(variance, median_heuristic(X), jitter)

    @property
    def log_params(self) -> np.ndarray:
        """``[log variance, log l_1, ..., log l_D]``."""
        return np.concatenate([[np.log(self.variance)], np.log(self.length_scales)])

    def with_log_params(self, theta: np.ndarray) -> "KernelConfig":
        theta = np.asarray(theta, dtype=float)
        return KernelConfig(float(np.exp(theta[0])), np.exp(theta[1:]), self.jitter)

    def copy(self) -> "KernelConfig":
        return KernelConfig(self.variance, self.length_scales.copy(), self.jitter)

    def to_dict(self) -> dict:
        return {
            "variance": self.variance,
            "length_scales": self.length_scales.tolist(),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelConfig":
        return cls(d["variance"], np.asarray(d["length_scales"], dtype=float), d["jitter"])


def _check_dims(cfg: KernelConfig, *arrays: np.ndarray) -> None:
    for a in arrays:
        if a.shape[-1] != cfg.dim:
            raise ValueError(
                f"feature dimension {a.shape[-1]} does not match kernel dimension {cfg.dim}"
            )


def eval(cfg: KernelConfig, x, x2) -> float:  # noqa: A001
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    _check_dims(cfg, x, x2)
    r = (x - x2) / cfg.length_scales
    return cfg.variance * float(np.exp(-0.5 * r @ r))


def gram(cfg: KernelConfig, A: np.ndarray, B: np.ndarray | None = None,
         symmetric: bool | None = None) -> np.ndarray:
    """Kernel matrix between the rows of ``A`` and ``B``.

    With ``B`` omitted (or ``B is A``) the result is symmetric and carries the
    jitter on its diagonal.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if symmetric is None:
        symmetric = B is None or B is A
    if B is None:
        B = A
    B = np.atleast_2d(np.asarray(B, dtype=float))
    _check_dims(cfg, A, B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("gram needs nonempty inputs")
    ls = cfg.length_scales
    if symmetric:
        K = np.exp(-0.5 * cdist(A / ls, A / ls, "sqeuclidean"))
        K *= cfg.variance
        K = 0.5 * (K + K.T)
        K[np.diag_indices_from(K)] += cfg.jitter
        return K
    return cfg.variance * np.exp(-0.5 * cdist(A / ls, B / ls, "sqeuclidean"))


def diag(cfg: KernelConfig, A: np.ndarray) -> np.ndarray:
    """Prior variances ``k(x, x)`` (no jitter)."""
    return np.full(np.atleast_2d(A).shape[0], cfg.variance)


def grad_contract(cfg: KernelConfig, A: np.ndarray, B: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(G * K(A, B))`` w.r.t. the log-hyperparameters.

    The jitter is excluded. Avoids materializing the ``D x n x m`` derivative
    tensor: for ``W = G * K`` the length-scale part reduces to row/column sums
    of ``W`` against squared features.
    """
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    K = gram(cfg, A, B, symmetric=False)
    W = G * K
    g = np.empty(cfg.dim + 1)
    g[0] = W.sum()
    sq = (W.sum(axis=1) @ A**2) - 2.0 * np.einsum("nd,nd->d", A, W @ B) + (W.sum(axis=0) @ B**2)
    g[1:] = sq / cfg.length_scales**2
    return g


def grad_contract_diag(cfg: KernelConfig, g_diag: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(g_diag * k(x_i, x_i))`` w.r.t. the log-hyperparameters."""
    out = np.zeros(cfg.dim + 1)
    out[0] = cfg.variance * np.sum(g_diag)
    return out


def median_heuristic(X: np.ndarray, max_points: int = 2000, seed: int = 0) -> np.ndarray:
    """Median of the positive pairwise Euclidean distances, one copy per feature.

    At most ``max_points`` rows (a seeded subsample) enter the computation.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("median heuristic needs at least two points")
    if X.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(X.shape[0], size=max_points, replace=False)
        X = X[np.sort(idx)]
    d = pdist(X)
    d = d[d > 0]
    if d.size == 0:
        raise ValueError("all points are identical; median pairwise distance is zero")
    return np.full(X.shape[1], float(np.median(d)))


def cholesky(K: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor, raising :class:`ConditioningError` with context."""
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"Cholesky factorization failed for {what}") from exc
