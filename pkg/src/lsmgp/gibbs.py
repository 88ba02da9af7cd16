"""Exact Gibbs sampler for the augmented full-GP model.

One sweep draws, in order,

    w_ic  ~ PG(y'_ic + n_ic, |f_ic|)
    f^c   ~ N(1/2 A^c (y'^c - n^c), A^c),   A^c = (diag(w^c) + K^-1)^-1
    lam_i ~ Ga(1 + sum_c n_ic, C)
    n_ic  ~ Po(lam_i sigma(-f_ic))

The f draw uses the perturbation trick: for ``u = r + W^1/2 z1 + L^-T z2``
(``K = L L^T``), ``A u`` has mean ``A r`` and covariance ``A``; applying ``A``
only needs the Cholesky factor of ``I + W^1/2 K W^1/2``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit

from . import kernel as kern
from .augmentation import pg_sample, precision_factor
from .kernel import KernelConfig, cholesky
from .likelihood import logistic_softmax

logger = logging.getLogger(__name__)

LARGE_N = 2000


@dataclass
class GibbsState:
    f: np.ndarray
    lam: np.ndarray
    n: np.ndarray
    omega: np.ndarray


@dataclass
class GibbsSamples:
    """Retained latent draws, ``f[s, c, i]``."""

    f: np.ndarray
    X: np.ndarray
    kernels: list
    lam: np.ndarray | None = None

    def __len__(self) -> int:
        return self.f.shape[0]

    def posterior_mean(self) -> np.ndarray:
        if not len(self):
            raise ValueError("no retained samples")
        return self.f.mean(axis=0)

    def posterior_var(self) -> np.ndarray:
        if not len(self):
            raise ValueError("no retained samples")
        return self.f.var(axis=0)


class GibbsChain:
    """Gibbs chain over ``(f, lam, n, w)`` for labels ``y`` (0-based)."""

    def __init__(self, X: np.ndarray, y: np.ndarray, kernels, n_classes: int | None = None, seed=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=int)
        N = self.X.shape[0]
        self.C = int(n_classes if n_classes is not None else self.y.max() + 1)
        if isinstance(kernels, KernelConfig):
            kernels = [kernels]
        if len(kernels) not in (1, self.C):
            raise ValueError("need one shared kernel or one per class")
        self.kernels = list(kernels)
        if N > LARGE_N:
            warnings.warn(f"Gibbs sampling with dense {N}x{N} solves", RuntimeWarning, stacklevel=2)
        self.y1h = np.zeros((self.C, N))
        self.y1h[self.y, np.arange(N)] = 1.0
        self._K = [kern.gram(k, self.X) for k in self.kernels]
        self._L = [cholesky(K, f"kernel matrix of group {g}") for g, K in enumerate(self._K)]
        self.rng = np.random.default_rng(seed)
        self.iteration = 0
        self.state = GibbsState(
            f=np.zeros((self.C, N)),
            lam=np.zeros(N),
            n=np.zeros((self.C, N), dtype=np.int64),
            omega=np.zeros((self.C, N)),
        )

    @property
    def N(self) -> int:
        return self.X.shape[0]

    def _group(self, c: int) -> int:
        return 0 if len(self.kernels) == 1 else c

    def kernel_matrix(self, c: int) -> np.ndarray:
        return self._K[self._group(c)]

    def draw_f(self, c: int, omega: np.ndarray, n: np.ndarray) -> np.ndarray:
        K = self._K[self._group(c)]
        L = self._L[self._group(c)]
        rng = self.rng
        LB, sw = precision_factor(K, omega)
        r = 0.5 * (self.y1h[c] - n)
        # K u with u = r + W^1/2 z1 + L^-T z2
        Ku = K @ (r + sw * rng.standard_normal(self.N)) + L @ rng.standard_normal(self.N)
        return Ku - K @ (sw * cho_solve((LB, True), sw * Ku))

    def draw_lambda(self, n: np.ndarray) -> np.ndarray:
        return self.rng.gamma(1.0 + n.sum(axis=0), 1.0 / self.C)

    def draw_counts(self, lam: np.ndarray, f: np.ndarray) -> np.ndarray:
        return self.rng.poisson(lam[None, :] * expit(-f))

    def sweep(self) -> GibbsState:
        s = self.state
        rng = self.rng
        C = self.C
        s.omega = pg_sample(self.y1h.astype(np.int64) + s.n, np.abs(s.f), rng)
        for c in range(C):
            s.f[c] = self.draw_f(c, s.omega[c], s.n[c])
        s.lam = self.draw_lambda(s.n)
        s.n = self.draw_counts(s.lam, s.f)
        self.iteration += 1
        return s

    def run(self, n_burnin: int = 1000, n_samples: int = 1000, thin: int = 5) -> GibbsSamples:
        if thin < 1:
            raise ValueError("thin must be >= 1")
        for _ in range(n_burnin):
            self.sweep()
        fs = np.empty((n_samples, self.C, self.N))
        lams = np.empty((n_samples, self.N))
        for k in range(n_samples):
            for _ in range(thin):
                self.sweep()
            fs[k] = self.state.f
            lams[k] = self.state.lam
        return GibbsSamples(fs, self.X, self.kernels, lams)


def run(X, y, kernels, n_burnin: int = 1000, n_samples: int = 1000, thin: int = 5,
        seed=None, n_classes: int | None = None) -> GibbsSamples:
    return GibbsChain(X, y, kernels, n_classes, seed).run(n_burnin, n_samples, thin)


def latent_test_conditional(samples: GibbsSamples, X_test: np.ndarray):
    """Per-sample conditional mean ``(S, C, n)`` and variance ``(C, n)`` at test inputs."""
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    S, C, N = samples.f.shape
    means = np.empty((S, C, X_test.shape[0]))
    var = np.empty((C, X_test.shape[0]))
    groups = {}
    for c in range(C):
        g = 0 if len(samples.kernels) == 1 else c
        if g not in groups:
            cfg = samples.kernels[g]
            L = cholesky(kern.gram(cfg, samples.X), f"kernel matrix of group {g}")
            Ksn = kern.gram(cfg, X_test, samples.X, symmetric=False)
            V = solve_triangular(L, Ksn.T, lower=True)
            proj = solve_triangular(L, V, lower=True, trans="T").T
            v = kern.diag(cfg, X_test) - np.einsum("mn,mn->n", V, V)
            groups[g] = (proj, np.maximum(v, 0.0))
        proj, v = groups[g]
        means[:, c, :] = samples.f[:, c, :] @ proj.T
        var[c] = v
    return means, var


def predictive_from_samples(samples: GibbsSamples, X_test: np.ndarray, rng=None, n_draws: int = 1):
    """Predictive class probabilities and latent moments at ``X_test``.

    For every retained draw of ``f`` the test latents are drawn from the exact
    GP conditional and mapped through the logistic-softmax. Returns
    ``(probs (n, C), latent_mean (n, C), latent_var (n, C))``.
    """
    if not len(samples):
        raise ValueError("no retained samples")
    rng = np.random.default_rng(rng)
    means, var = latent_test_conditional(samples, X_test)
    sd = np.sqrt(var)
    S, C, n = means.shape
    acc = np.zeros((n, C))
    for s in range(S):
        for _ in range(n_draws):
            f = means[s] + sd * rng.standard_normal((C, n))
            acc += logistic_softmax(f.T)
    probs = acc / (S * n_draws)
    latent_mean = means.mean(axis=0).T
    latent_var = (means.var(axis=0) + var).T
    return probs, latent_mean, latent_var


def split_rhat(chains) -> np.ndarray:
    """Split-R-hat per scalar for draws shaped ``(n_chains, n_draws, ...)``."""
    x = np.asarray(chains, dtype=float)
    m, n = x.shape[:2]
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    x = np.concatenate([x[:, :half], x[:, half:2 * half]], axis=0)
    n = half
    chain_mean = x.mean(axis=1)
    W = x.var(axis=1, ddof=1).mean(axis=0)
    B = n * chain_mean.var(axis=0, ddof=1)
    var_hat = (n - 1) / n * W + B / n
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.sqrt(var_hat / W)
    return np.where(W > 0, r, 1.0)


def forward_joint(X: np.ndarray, kernels, n_classes: int, rng):
    """Draw ``(f, y, lam, n)`` from the augmented joint by ancestral sampling.

    ``f ~ GP``, ``y ~ logistic-softmax(f)``, ``lam | f ~ Exp(sum_c sigma(f_c))``,
    ``n_c | lam, f ~ Po(lam sigma(-f_c))``. Used for joint-distribution tests.
    """
    X = np.atleast_2d(X)
    N = X.shape[0]
    if isinstance(kernels, KernelConfig):
        kernels = [kernels]
    f = np.empty((n_classes, N))
    for c in range(n_classes):
        K = kern.gram(kernels[0 if len(kernels) == 1 else c], X)
        f[c] = cholesky(K) @ rng.standard_normal(N)
    p = logistic_softmax(f.T)
    y = np.array([rng.choice(n_classes, p=pi) for pi in p])
    lam = rng.exponential(1.0 / expit(f).sum(axis=0))
    n = rng.poisson(lam[None, :] * expit(-f))
    return f, y, lam, n
