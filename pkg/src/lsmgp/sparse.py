"""Inducing-point machinery shared by training and prediction.

Every class owns a Gaussian ``q(u^c) = N(mu^c, Sigma^c)`` over the latent
function at the common inducing inputs ``Z``. Kernel hyperparameters are
either shared (one :class:`KernelConfig`) or independent (one per class);
in both cases the inducing inputs are shared.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernel as kern
from .kernel import ConditioningError, KernelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConditioningWarning(RuntimeWarning):
    pass


def select_inducing(X: np.ndarray, M: int, seed=None) -> np.ndarray:
    """kmeans++ seeding (D^2 sampling) of ``M`` rows of ``X``.

    Once every remaining point coincides with a chosen center the D^2 weights
    vanish; the remaining picks are then uniform over unchosen rows.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = X.shape[0]
    if not 1 <= M <= N:
        raise ValueError(f"need 1 <= M <= N, got M={M}, N={N}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(M, dtype=int)
    taken = np.zeros(N, dtype=bool)
    chosen[0] = rng.integers(N)
    taken[chosen[0]] = True
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for k in range(1, M):
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            j = rng.choice(N, p=w / total)
        else:
            j = rng.choice(np.flatnonzero(~taken))
        chosen[k] = j
        taken[j] = True
        d2 = np.minimum(d2, np.sum((X - X[j]) ** 2, axis=1))
    return X[chosen].copy()


@dataclass
class InterpolationCache:
    """Projection of a batch of inputs onto the inducing points.

    ``kappa[g] = K_nm K_mm^{-1}``, ``white[g] = K_nm L^{-T}`` (with
    ``K_mm = L L^T``) and ``ktilde[g] = diag(K_nn - kappa K_mn)`` for every
    kernel group ``g`` (one group when hyperparameters are shared).
    """

    X: np.ndarray
    kappa: list
    white: list
    ktilde: list
    shared: bool

    def group(self, c: int) -> int:
        return 0 if self.shared else c


@dataclass
class SparseGPState:
    Z: np.ndarray
    kernels: list
    mu: np.ndarray
    sigma: np.ndarray
    _chol: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        C = self.mu.shape[0]
        if len(self.kernels) not in (1, C):
            raise ValueError("need one shared kernel or one kernel per class")
        if self.mu.shape != (C, self.M) or self.sigma.shape != (C, self.M, self.M):
            raise ValueError("mu/sigma shapes do not match the inducing inputs")
        self.refresh()

    @classmethod
    def prior(cls, Z: np.ndarray, kernels: list, n_classes: int) -> "SparseGPState":
        """``mu = 0`` and ``Sigma = K_mm`` for every class."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        M = Z.shape[0]
        mu = np.zeros((n_classes, M))
        sigma = np.empty((n_classes, M, M))
        for c in range(n_classes):
            sigma[c] = kern.gram(kernels[0 if len(kernels) == 1 else c], Z)
        return cls(Z, list(kernels), mu, sigma)

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def shared(self) -> bool:
        return len(self.kernels) == 1

    def group(self, c: int) -> int:
        return 0 if self.shared else c

    def kernel(self, c: int) -> KernelConfig:
        return self.kernels[self.group(c)]

    def refresh(self) -> None:
        """Recompute the ``K_mm`` Cholesky factors after a hyperparameter change."""
        self._kmm = []
        self._chol = []
        for g, cfg in enumerate(self.kernels):
            K = kern.gram(cfg, self.Z)
            self._kmm.append(K)
            self._chol.append(kern.cholesky(K, f"K_mm of kernel group {g}"))

    def kmm(self, c: int) -> np.ndarray:
        return self._kmm[self.group(c)]

    def chol(self, c: int) -> np.ndarray:
        return self._chol[self.group(c)]

    def copy(self) -> "SparseGPState":
        return SparseGPState(self.Z.copy(), [k.copy() for k in self.kernels],
                             self.mu.copy(), self.sigma.copy())

    def permute_classes(self, perm) -> "SparseGPState":
        perm = np.asarray(perm)
        kernels = [k.copy() for k in self.kernels]
        if not self.shared:
            kernels = [kernels[p] for p in perm]
        return SparseGPState(self.Z.copy(), kernels, self.mu[perm].copy(), self.sigma[perm].copy())


def interpolate(state: SparseGPState, X: np.ndarray) -> InterpolationCache:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    kappas, whites, ktildes = [], [], []
    for g, cfg in enumerate(state.kernels):
        L = state._chol[g]
        Knm = kern.gram(cfg, X, state.Z, symmetric=False)
        V = solve_triangular(L, Knm.T, lower=True).T
        kappa = solve_triangular(L, V.T, lower=True, trans="T").T
        kt = kern.diag(cfg, X) - np.einsum("nm,nm->n", V, V)
        floor = -1e-8 * cfg.variance
        if np.any(kt < floor):
            warnings.warn(
                f"conditional variance dipped to {kt.min():.3g} in kernel group {g}",
                ConditioningWarning, stacklevel=2)
        kappas.append(kappa)
        whites.append(V)
        ktildes.append(np.maximum(kt, 0.0))
    return InterpolationCache(X, kappas, whites, ktildes, state.shared)


def latent_predictive(state: SparseGPState, X: np.ndarray, cache: InterpolationCache | None = None):
    """Per-class predictive mean and variance of the latent functions.

    Returns two ``(n, C)`` arrays. The variance is
    ``K_** + kappa (Sigma K_mm^{-1} - I) K_m*``, i.e. ``ktilde + kappa Sigma kappa^T``.
    """
    if cache is None:
        cache = interpolate(state, X)
    n = cache.X.shape[0]
    C = state.n_classes
    mean = np.empty((n, C))
    var = np.empty((n, C))
    for c in range(C):
        g = cache.group(c)
        kappa = cache.kappa[g]
        mean[:, c] = kappa @ state.mu[c]
        var[:, c] = cache.ktilde[g] + np.einsum("nm,mk,nk->n", kappa, state.sigma[c], kappa)
    return mean, np.maximum(var, 0.0)


def kl_divergence(state: SparseGPState, c: int) -> float:
    """``KL(N(mu^c, Sigma^c) || N(0, K_mm^c))``."""
    L = state.chol(c)
    Ls = kern.cholesky(state.sigma[c], f"Sigma of class {c}")
    A = solve_triangular(L, Ls, lower=True)
    a = solve_triangular(L, state.mu[c], lower=True)
    logdet_k = 2.0 * np.sum(np.log(np.diag(L)))
    logdet_s = 2.0 * np.sum(np.log(np.diag(Ls)))
    return 0.5 * (np.sum(A * A) + a @ a - state.M + logdet_k - logdet_s)


def kmm_inverse(state: SparseGPState, c: int) -> np.ndarray:
    L = state.chol(c)
    return cho_solve((L, True), np.eye(state.M))


# -- checkpoint -------------------------------------------------------------

def state_to_dict(state: SparseGPState, normalization: dict | None = None,
                  classes=None, extra: dict | None = None) -> dict:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "n_classes": state.n_classes,
        "n_features": state.Z.shape[1],
        "shared_hyperparameters": state.shared,
        "kernels": [k.to_dict() for k in state.kernels],
        "inducing_inputs": state.Z.tolist(),
        "mu": state.mu.tolist(),
        "sigma": state.sigma.tolist(),
        "normalization": normalization,
        "classes": None if classes is None else list(np.asarray(classes).tolist()),
    }
    if extra:
        doc.update(extra)
    return doc


def state_from_dict(doc: dict) -> SparseGPState:
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    kernels = [KernelConfig.from_dict(k) for k in doc["kernels"]]
    return SparseGPState(np.asarray(doc["inducing_inputs"], dtype=float), kernels,
                         np.asarray(doc["mu"], dtype=float), np.asarray(doc["sigma"], dtype=float))


def save_checkpoint(path, state: SparseGPState, normalization: dict | None = None,
                    classes=None, extra: dict | None = None) -> None:
    doc = state_to_dict(state, normalization, classes, extra)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path):
    """Returns ``(state, document)``."""
    doc = json.loads(Path(path).read_text())
    return state_from_dict(doc), doc


__all__ = [
    "ConditioningError",
    "ConditioningWarning",
    "InterpolationCache",
    "SparseGPState",
    "interpolate",
    "latent_predictive",
    "select_inducing",
]


def predict_proba(state: SparseGPState, X: np.ndarray, n_samples: int = 1000,
                  sampler: str = "monte-carlo", rng=None) -> np.ndarray:
    """Class probabilities at ``X``, integrating the latent predictive by (Q)MC."""
    from .likelihood import predict_proba as _mc

    mean, var = latent_predictive(state, X)
    return _mc(mean, var, n_samples=n_samples, sampler=sampler, rng=rng)
