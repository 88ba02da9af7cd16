"""Closed-form stochastic variational inference for the augmented model.

Variational family::

    q(u) q(lam) q(w, n) = prod_c N(u^c | mu^c, Sigma^c)
                          prod_i Ga(lam_i | alpha_i, beta_i)
                          prod_ic PG(w_ic | y'_ic + n_ic, b_ic) Po(n_ic | gamma_ic)

Local parameters (alpha, beta, gamma, b) get exact coordinate updates;
global parameters (mu, Sigma) move towards their coordinate optimum by a
convex combination with step ``rho_t``. Kernel hyperparameters follow the
analytic ELBO gradient with Adam.

The local updates follow from the ELBO below. Both the ``2^-(y'+n)``
factor and the ``sigma(-f)^n`` form of the Poisson term are kept, so the
count update is

    gamma_ic = exp(psi(alpha_i)) / beta_i * exp(-E f_ic / 2) / (2 cosh(fbar_ic / 2))

which for negligible latent variance equals ``E[lam_i] sigma(-E f_ic)``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import digamma, gammaln, log_expit, xlogy

from . import kernel as kern
from .augmentation import log_cosh_half, pg_mean
from .kernel import KernelConfig, cholesky
from .likelihood import predict_proba
from .sparse import (
    InterpolationCache,
    SparseGPState,
    interpolate,
    kl_divergence,
    latent_predictive,
    select_inducing,
)

logger = logging.getLogger(__name__)

LOG2 = np.log(2.0)
TRACE_COLUMNS = ("iteration", "wall_time_s", "elbo", "test_error", "test_nll")


@dataclass
class LocalVarState:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    b: np.ndarray

    def theta(self, y1h: np.ndarray, idx=slice(None)) -> np.ndarray:
        """``E_q[w_ic] = (y' + gamma) / (2b) tanh(b / 2)``."""
        return pg_mean(y1h[idx] + self.gamma[idx], self.b[idx])

    def copy(self) -> "LocalVarState":
        return LocalVarState(self.alpha.copy(), self.beta.copy(), self.gamma.copy(), self.b.copy())


@dataclass
class TrainConfig:
    n_iterations: int = 100
    minibatch_size: int = 200
    n_inducing: int | None = 200
    rho_delay: float = 1.0
    rho_forget: float = 0.6
    full_batch_cavi: bool = True
    inner_iters: int = 5
    class_subsample: int = 0
    hyper_period: int = 10
    hyper_lr: float = 0.01
    shared_hyper: bool = True
    seed: int = 0
    elbo_every: int = 1
    eval_every: int = 0
    mc_samples: int = 1000
    approx_threshold: float | None = None

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1")
        if self.rho_forget < 0 or self.rho_delay < 1:
            raise ValueError("rho_t = (delay + t)^-forget needs delay >= 1 and forget >= 0")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.class_subsample < 0:
            raise ValueError("class_subsample must be >= 0")

    def rho(self, t: int) -> float:
        return float((self.rho_delay + t) ** (-self.rho_forget))


@dataclass
class FitResult:
    state: SparseGPState
    local: LocalVarState
    trace: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def one_hot(y: np.ndarray, C: int) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    out = np.zeros((y.size, C))
    out[np.arange(y.size), y] = 1.0
    return out


# Named random substreams derived from one seed; the order is fixed so that a
# stream keeps its identity whichever subset of streams a caller uses.
STREAM_NAMES = ("init", "minibatch", "classes", "mc-predict", "gibbs", "split", "toy")


def substreams(seed) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAM_NAMES))
    return dict(zip(STREAM_NAMES, children))


def _rngs(seed):
    return {k: np.random.default_rng(s) for k, s in substreams(seed).items()}


# -- moments and local updates ------------------------------------------------

def _quad_diag(kappa: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.einsum("nm,nm->n", kappa @ S, kappa)


def expected_f_moments(state: SparseGPState, cache: InterpolationCache, classes=None):
    """``(E f, sqrt(E f^2))`` per datapoint and class, each ``(n, len(classes))``."""
    if classes is None:
        classes = range(state.n_classes)
    n = cache.X.shape[0]
    mean = np.empty((n, len(classes)))
    fbar = np.empty((n, len(classes)))
    for j, c in enumerate(classes):
        g = cache.group(c)
        kappa = cache.kappa[g]
        m = kappa @ state.mu[c]
        sq = cache.ktilde[g] + _quad_diag(kappa, state.sigma[c]) + m * m
        if np.any(sq < -1e-8 * state.kernel(c).variance):
            raise kern.ConditioningError(f"negative second moment for class {c}")
        mean[:, j] = m
        fbar[:, j] = np.sqrt(np.maximum(sq, m * m))
    return mean, fbar


def init_local(state: SparseGPState, X: np.ndarray) -> LocalVarState:
    """``gamma = 1/C``, ``alpha = 2``, ``beta = C`` and ``b`` at the prior ``fbar``."""
    N = np.atleast_2d(X).shape[0]
    C = state.n_classes
    _, fbar = expected_f_moments(state, interpolate(state, X))
    return LocalVarState(np.full(N, 2.0), np.full(N, float(C)), np.full((N, C), 1.0 / C), fbar)


def update_local(state: SparseGPState, local: LocalVarState, cache: InterpolationCache,
                 idx: np.ndarray, inner_iters: int = 5, classes=None,
                 approx_threshold: float | None = None) -> LocalVarState:
    """Coordinate updates of ``b``, then ``inner_iters`` rounds of ``gamma`` / ``alpha``.

    ``cache`` must cover ``X[idx]``. With a class subset only those columns are
    touched and ``alpha`` uses the scaled estimator ``1 + C/|K| sum_K gamma``.
    """
    C = state.n_classes
    classes = np.arange(C) if classes is None else np.asarray(classes)
    idx = np.asarray(idx)
    mean, fbar = expected_f_moments(state, cache, classes)
    # log of exp(-m/2) / (2 cosh(fbar/2)); exact and overflow-free in log-space
    log_ratio = -0.5 * mean - LOG2 - log_cosh_half(fbar)
    if approx_threshold is not None:
        low = mean < approx_threshold
        log_ratio[low] = log_expit(-mean[low])
    beta = float(C)
    log_beta = np.log(beta)
    scale = C / len(classes)
    alpha = local.alpha[idx]
    for _ in range(inner_iters):
        gamma = np.exp(digamma(alpha)[:, None] - log_beta + log_ratio)
        alpha = 1.0 + scale * gamma.sum(axis=1)
    if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(alpha))):
        bad = np.argwhere(~np.isfinite(gamma))
        i, j = (bad[0] if bad.size else (int(np.flatnonzero(~np.isfinite(alpha))[0]), 0))
        raise FloatingPointError(f"non-finite local update at datapoint {idx[i]}, class {classes[j]}")
    rows = idx[:, None]
    local.b[rows, classes] = fbar
    local.gamma[rows, classes] = gamma
    local.alpha[idx] = alpha
    local.beta[idx] = beta
    return local


def update_global(state: SparseGPState, local: LocalVarState, cache: InterpolationCache,
                  idx: np.ndarray, y1h: np.ndarray, rho: float = 1.0, scale: float = 1.0,
                  classes=None) -> SparseGPState:
    """Blend ``(mu^c, Sigma^c)`` towards the coordinate optimum.

    Target: ``Sigma_hat = (s kappa^T diag(theta) kappa + K_mm^-1)^-1`` and
    ``mu_hat = 1/2 Sigma_hat s kappa^T (y' - gamma)``. Computed in the whitened
    basis ``K_mm = L L^T`` as ``Sigma_hat = L B^-1 L^T`` with
    ``B = I + s V^T diag(theta) V``, ``V = kappa L``, so ``K_mm`` is never inverted.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    C = state.n_classes
    classes = np.arange(C) if classes is None else np.asarray(classes)
    idx = np.asarray(idx)
    I = np.eye(state.M)
    for c in classes:
        V = cache.white[cache.group(c)]
        L = state.chol(c)
        h = y1h[idx, c] + local.gamma[idx, c]
        theta = pg_mean(h, local.b[idx, c])
        r = y1h[idx, c] - local.gamma[idx, c]
        B = I + scale * (V.T * theta) @ V
        LB = cholesky(B, f"global update of class {c}")
        W = solve_triangular(LB, L.T, lower=True)
        sig_hat = W.T @ W
        mu_hat = 0.5 * scale * (L @ cho_solve((LB, True), V.T @ r))
        if rho == 1.0:
            state.mu[c] = mu_hat
            state.sigma[c] = 0.5 * (sig_hat + sig_hat.T)
        else:
            state.mu[c] = (1.0 - rho) * state.mu[c] + rho * mu_hat
            s = (1.0 - rho) * state.sigma[c] + rho * sig_hat
            state.sigma[c] = 0.5 * (s + s.T)
    return state


# -- objective -----------------------------------------------------------------

def elbo_terms(state: SparseGPState, local: LocalVarState, cache: InterpolationCache,
               idx: np.ndarray, y1h: np.ndarray, scale: float = 1.0) -> dict:
    """ELBO pieces; ``scale`` multiplies the datapoint sums (minibatch estimate)."""
    idx = np.asarray(idx)
    y = y1h[idx]
    a = local.alpha[idx]
    beta = local.beta[idx]
    g = local.gamma[idx]
    b = local.b[idx]
    mean, fbar = expected_f_moments(state, cache)
    h = y + g
    theta = pg_mean(h, b)

    e_log_lam = digamma(a) - np.log(beta)
    e_lam = a / beta
    lam_entropy = a - np.log(beta) + gammaln(a) + (1.0 - a) * digamma(a)
    poisson = g * e_log_lam[:, None] - xlogy(g, g) + g - e_lam[:, None]
    polya = -h * log_cosh_half(b) + 0.5 * b * b * theta
    lik = -h * LOG2 + 0.5 * (y - g) * mean - 0.5 * fbar * fbar * theta
    kl = np.array([kl_divergence(state, c) for c in range(state.n_classes)])
    return {
        "likelihood": scale * lik.sum(),
        "poisson": scale * poisson.sum(),
        "polya_gamma": scale * polya.sum(),
        "lambda_entropy": scale * lam_entropy.sum(),
        "kl": kl,
    }


def elbo(state: SparseGPState, local: LocalVarState, cache: InterpolationCache,
         idx: np.ndarray, y1h: np.ndarray, scale: float = 1.0) -> float:
    """Evidence lower bound (larger is better), up to the flat-prior constant."""
    t = elbo_terms(state, local, cache, idx, y1h, scale)
    return float(t["likelihood"] + t["poisson"] + t["polya_gamma"] + t["lambda_entropy"] - t["kl"].sum())


def full_elbo(state, local, X, y1h) -> float:
    N = np.atleast_2d(X).shape[0]
    return elbo(state, local, interpolate(state, X), np.arange(N), y1h)


# -- hyperparameters -----------------------------------------------------------

def hyper_gradient(state: SparseGPState, local: LocalVarState, X_batch: np.ndarray,
                   idx: np.ndarray, y1h: np.ndarray, scale: float = 1.0,
                   classes=None, class_scale: float = 1.0) -> list:
    """Analytic ELBO gradient w.r.t. each kernel group's log-hyperparameters.

    With ``kappa = K_nm K_mm^-1`` and ``ktilde = diag(K_nn - kappa K_mn)`` the
    data term depends on the kernel only through ``kappa`` and ``ktilde``; its
    gradients ``G`` (w.r.t. kappa) and ``g`` (w.r.t. ktilde) are pushed back to
    ``K_nm``, ``K_mm`` and ``diag(K_nn)``, then contracted with the kernel
    derivatives.
    """
    C = state.n_classes
    classes = np.arange(C) if classes is None else np.asarray(classes)
    idx = np.asarray(idx)
    cache = interpolate(state, X_batch)
    grads = [np.zeros(k.dim + 1) for k in state.kernels]
    kinv_cache = {}
    for c in classes:
        grp = state.group(c)
        cfg = state.kernels[grp]
        L = state.chol(c)
        if grp not in kinv_cache:
            kinv_cache[grp] = cho_solve((L, True), np.eye(state.M))
        Kinv = kinv_cache[grp]
        kappa = cache.kappa[grp]
        mu, S = state.mu[c], state.sigma[c]
        theta = pg_mean(y1h[idx, c] + local.gamma[idx, c], local.b[idx, c])
        r = 0.5 * (y1h[idx, c] - local.gamma[idx, c])
        m = kappa @ mu
        G = scale * (np.outer(r, mu) - theta[:, None] * (kappa @ S + np.outer(m, mu)))
        gd = -0.5 * scale * theta
        G_nm = G @ Kinv - 2.0 * gd[:, None] * kappa
        KS = Kinv @ (S + np.outer(mu, mu)) @ Kinv
        G_mm = -kappa.T @ G @ Kinv + (kappa.T * gd) @ kappa + 0.5 * (KS - Kinv)
        grad = (kern.grad_contract(cfg, X_batch, state.Z, G_nm)
                + kern.grad_contract(cfg, state.Z, state.Z, G_mm)
                + kern.grad_contract_diag(cfg, gd))
        grads[grp] += class_scale * grad
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite hyperparameter gradient")
    return grads


class Adam:
    """Adam ascent on a parameter vector."""

    def __init__(self, lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params + self.lr * mhat / (np.sqrt(vhat) + self.eps)


def hyper_step(state: SparseGPState, local: LocalVarState, X_batch, idx, y1h, optimizers: list,
               scale: float = 1.0, classes=None, class_scale: float = 1.0) -> list:
    """One Adam step on every kernel group touched by ``classes``; refreshes caches."""
    grads = hyper_gradient(state, local, X_batch, idx, y1h, scale, classes, class_scale)
    C = state.n_classes
    touched = {state.group(c) for c in (range(C) if classes is None else classes)}
    for grp in sorted(touched):
        cfg = state.kernels[grp]
        state.kernels[grp] = cfg.with_log_params(optimizers[grp].step(cfg.log_params, grads[grp]))
    state.refresh()
    return state.kernels


# -- orchestration -------------------------------------------------------------

def _dedupe_rows(Z: np.ndarray) -> np.ndarray:
    _, first = np.unique(Z, axis=0, return_index=True)
    return Z[np.sort(first)]


def initialize(X: np.ndarray, y: np.ndarray, config: TrainConfig, n_classes: int | None = None,
               kernels: list | None = None, Z: np.ndarray | None = None):
    """Prior-consistent starting state: inducing inputs, kernels, ``q(u)``, locals."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    C = int(n_classes if n_classes is not None else y.max() + 1)
    if C < 2:
        raise ValueError("need at least two classes")
    rngs = _rngs(config.seed)
    if kernels is None:
        base = KernelConfig.from_data(X)
        kernels = [base] if config.shared_hyper else [base.copy() for _ in range(C)]
    kernels = [k.copy() for k in kernels]
    if Z is None:
        N = X.shape[0]
        if config.n_inducing is None or config.n_inducing >= N:
            Z = X.copy()
        else:
            Z = select_inducing(X, config.n_inducing, rngs["init"])
        n_before = Z.shape[0]
        Z = _dedupe_rows(Z)
        if Z.shape[0] < n_before:
            logger.info("dropped %d duplicate inducing inputs", n_before - Z.shape[0])
    state = SparseGPState.prior(Z, kernels, C)
    local = init_local(state, X)
    return state, local, rngs


def fit(X: np.ndarray, y: np.ndarray, config: TrainConfig | None = None, n_classes: int | None = None,
        X_test=None, y_test=None, kernels: list | None = None, Z: np.ndarray | None = None,
        timer=time.perf_counter) -> FitResult:
    """Stochastic CAVI with optional class subsampling and periodic hyper steps.

    ``y`` holds 0-based class indices. The returned trace has one row per
    iteration with the columns of :data:`TRACE_COLUMNS`.
    """
    config = config or TrainConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    state, local, rngs = initialize(X, y, config, n_classes, kernels, Z)
    N = X.shape[0]
    C = state.n_classes
    K = config.class_subsample
    if K > C:
        raise ValueError(f"class subsample size {K} exceeds the number of classes {C}")
    y1h = one_hot(y, C)
    full = config.minibatch_size >= N
    optimizers = [Adam(config.hyper_lr) for _ in state.kernels]
    result = FitResult(state, local)
    if K:
        result.notes.append(
            "class subsampling: q(lam) recomputed from the scaled alpha estimator each iteration")
    full_cache = None
    all_idx = np.arange(N)
    all_classes = np.arange(C)
    has_test = X_test is not None and y_test is not None and len(y_test) > 0
    t0 = timer()

    for t in range(config.n_iterations):
        if full:
            idx = all_idx
            if full_cache is None:
                full_cache = interpolate(state, X)
            cache = full_cache
        else:
            idx = np.sort(rngs["minibatch"].choice(N, size=config.minibatch_size, replace=False))
            cache = interpolate(state, X[idx])
        classes = all_classes if not K else np.sort(rngs["classes"].choice(C, size=K, replace=False))
        scale = N / idx.size
        rho = 1.0 if (full and config.full_batch_cavi) else config.rho(t)

        update_local(state, local, cache, idx, config.inner_iters, classes, config.approx_threshold)
        update_global(state, local, cache, idx, y1h, rho, scale, classes)

        if config.hyper_period and (t + 1) % config.hyper_period == 0:
            hyper_step(state, local, X[idx], idx, y1h, optimizers, scale, classes, C / len(classes))
            full_cache = None
            cache = None

        row = {"iteration": t + 1, "wall_time_s": timer() - t0, "elbo": None,
               "test_error": None, "test_nll": None}
        if config.elbo_every and (t + 1) % config.elbo_every == 0:
            if cache is None:
                cache = interpolate(state, X[idx])
                if full:
                    full_cache = cache
            row["elbo"] = elbo(state, local, cache, idx, y1h, scale)
        if has_test and config.eval_every and (t + 1) % config.eval_every == 0:
            p = predict_proba(*latent_predictive(state, X_test), n_samples=config.mc_samples,
                              rng=rngs["mc-predict"])
            row["test_error"] = float(np.mean(np.argmax(p, axis=1) != np.asarray(y_test)))
            row["test_nll"] = float(-np.mean(np.log(np.maximum(p[np.arange(len(y_test)), y_test], 1e-12))))
        result.trace.append(row)
    return result


def fit_extreme(X, y, config: TrainConfig, **kwargs) -> FitResult:
    """:func:`fit` with class subsampling; ``config.class_subsample`` must be set."""
    if config.class_subsample < 1:
        raise ValueError("fit_extreme needs class_subsample >= 1")
    return fit(X, y, config, **kwargs)


def write_trace_csv(path, trace: list, wall_time: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            out = []
            for col in TRACE_COLUMNS:
                v = row.get(col)
                if col == "wall_time_s" and not wall_time:
                    v = None
                out.append("" if v is None else repr(float(v)) if col != "iteration" else str(v))
            w.writerow(out)
