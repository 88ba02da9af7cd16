"""Gamma, Poisson and Polya-Gamma augmentation of the logistic-softmax model.

The augmented joint for datapoint ``i`` is

    prod_c Po(n_ic | lam_i) PG(w_ic | y'_ic + n_ic, 0)
           2^-(y'_ic + n_ic) exp((y'_ic - n_ic) f_ic / 2 - f_ic^2 w_ic / 2)

under an improper flat prior on ``lam_i >= 0``. Summing over ``n`` and
integrating ``w`` and ``lam`` recovers ``sigma(f_iy) / sum_c sigma(f_ic)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, gammaln, log_ndtr

from .kernel import cholesky

# -- Polya-Gamma moments ----------------------------------------------------

_TAYLOR_CUTOFF = 1e-4


def pg_mean(b, c):
    """``E[PG(b, c)] = b / (2c) tanh(c / 2)``, with the small-``c`` series."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < _TAYLOR_CUTOFF
    safe = np.where(small, 1.0, c)
    out = np.where(small, b * (0.25 - c * c / 48.0), b / (2.0 * safe) * np.tanh(safe / 2.0))
    return out[()] if out.ndim == 0 else out


def pg_var(b, c):
    """``Var[PG(b, c)] = b (sinh c - c) / (4 c^3 cosh^2(c/2))``; ``b/24`` at ``c = 0``."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-3
    safe = np.where(small, 1.0, c)
    big = b * (np.sinh(safe) - safe) / (4.0 * safe**3 * np.cosh(safe / 2.0) ** 2)
    out = np.where(small, b * (1.0 / 24.0 - c * c / 240.0), big)
    return out[()] if out.ndim == 0 else out


def log_cosh_half(x):
    """``log cosh(x / 2)`` without overflow."""
    x = np.abs(np.asarray(x, dtype=float))
    return 0.5 * x + np.log1p(np.exp(-x)) - np.log(2.0)


# -- Polya-Gamma sampler ----------------------------------------------------
#
# PG(1, c) = J*(1, c/2) / 4, and J*(1, z) is drawn by the alternating-series
# rejection method of Devroye as used by Polson, Scott & Windle: a proposal
# mixing a truncated inverse-Gaussian (x < t) and an exponential tail (x > t),
# accepted by bracketing the target density between partial sums.

_T = 0.64
_PI2_8 = np.pi**2 / 8.0


def _series_coef(n: int, x: np.ndarray) -> np.ndarray:
    """n-th coefficient of the alternating series for the J*(1, 0) density."""
    k = n + 0.5
    out = np.empty_like(x)
    lo = x <= _T
    xl = x[lo]
    out[lo] = np.pi * k * (2.0 / (np.pi * xl)) ** 1.5 * np.exp(-2.0 * k * k / xl)
    xh = x[~lo]
    out[~lo] = np.pi * k * np.exp(-0.5 * k * k * np.pi**2 * xh)
    return out


def _truncated_inv_gauss(z: np.ndarray, rng) -> np.ndarray:
    """Draws from IG(1/z, 1) truncated to (0, t); ``z = 0`` is the Levy limit."""
    out = np.empty_like(z)
    mu_big = z < 1.0 / _T

    idx = np.flatnonzero(mu_big)
    while idx.size:
        zz = z[idx]
        e1 = rng.standard_exponential(idx.size)
        e2 = rng.standard_exponential(idx.size)
        bad = e1 * e1 > 2.0 * e2 / _T
        while np.any(bad):
            nb = int(bad.sum())
            e1[bad] = rng.standard_exponential(nb)
            e2[bad] = rng.standard_exponential(nb)
            bad = e1 * e1 > 2.0 * e2 / _T
        x = _T / (1.0 + _T * e1) ** 2
        ok = rng.random(idx.size) <= np.exp(-0.5 * zz * zz * x)
        out[idx[ok]] = x[ok]
        idx = idx[~ok]

    idx = np.flatnonzero(~mu_big)
    while idx.size:
        mu = 1.0 / z[idx]
        y = rng.standard_normal(idx.size) ** 2
        muy = mu * y
        x = mu + 0.5 * mu * muy - 0.5 * mu * np.sqrt(4.0 * muy + muy * muy)
        flip = rng.random(idx.size) > mu / (mu + x)
        x[flip] = mu[flip] ** 2 / x[flip]
        ok = x < _T
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def _log_ig_cdf_t(z: np.ndarray) -> np.ndarray:
    """``log P(X < t)`` for ``X ~ IG(1/z, 1)``."""
    rt = np.sqrt(1.0 / _T)
    a = log_ndtr(rt * (_T * z - 1.0))
    b = 2.0 * z + log_ndtr(-rt * (_T * z + 1.0))
    return np.logaddexp(a, b)


def _sample_jstar(z: np.ndarray, rng) -> np.ndarray:
    z = np.abs(np.asarray(z, dtype=float))
    K = _PI2_8 + 0.5 * z * z
    log_p = np.log(np.pi / (2.0 * K)) - K * _T
    log_q = np.log(2.0) - z + _log_ig_cdf_t(z)
    p_exp = expit(log_p - log_q)

    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        m = pending.size
        zz = z[pending]
        x = np.empty(m)
        tail = rng.random(m) < p_exp[pending]
        x[tail] = _T + rng.standard_exponential(int(tail.sum())) / K[pending][tail]
        if not tail.all():
            x[~tail] = _truncated_inv_gauss(zz[~tail], rng)
        s = _series_coef(0, x)
        y = rng.random(m) * s
        accept = np.zeros(m, dtype=bool)
        open_ = np.ones(m, dtype=bool)
        n = 0
        while open_.any():
            n += 1
            o = np.flatnonzero(open_)
            term = _series_coef(n, x[o])
            if n % 2:
                s[o] -= term
                hit = y[o] <= s[o]
                accept[o[hit]] = True
                open_[o[hit]] = False
            else:
                s[o] += term
                miss = y[o] > s[o]
                open_[o[miss]] = False
        out[pending[accept]] = x[accept]
        pending = pending[~accept]
    return out


def pg_sample(b, c, rng=None):
    """Exact draws from ``PG(b, c)`` for integer ``b >= 0``.

    ``b`` and ``c`` broadcast; ``PG(0, c)`` is the point mass at zero. Each
    draw is the sum of ``b`` independent ``PG(1, c)`` variates.
    """
    rng = np.random.default_rng(rng)
    b_arr = np.asarray(b)
    c_arr = np.asarray(c, dtype=float)
    b_arr, c_arr = np.broadcast_arrays(b_arr, c_arr)
    if b_arr.dtype.kind == "f":
        if np.any(b_arr != np.round(b_arr)):
            raise ValueError("pg_sample supports integer shapes only")
    b_int = b_arr.astype(np.int64).ravel()
    if np.any(b_int < 0):
        raise ValueError("shape must be nonnegative")
    c_flat = c_arr.ravel()
    total = int(b_int.sum())
    out = np.zeros(b_int.size)
    if total:
        owner = np.repeat(np.arange(b_int.size), b_int)
        draws = 0.25 * _sample_jstar(0.5 * c_flat[owner], rng)
        out = np.bincount(owner, weights=draws, minlength=b_int.size)
    out = out.reshape(b_arr.shape)
    return float(out) if out.ndim == 0 else out


# -- complete conditionals --------------------------------------------------

@dataclass
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class GammaDist:
    shape: float
    rate: float

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def var(self):
        return self.shape / self.rate**2


@dataclass
class PoissonDist:
    rate: float

    @property
    def mean(self):
        return self.rate


def precision_factor(K: np.ndarray, omega: np.ndarray):
    """Cholesky factor of ``B = I + W^1/2 K W^1/2`` with ``W = diag(omega)``.

    ``(diag(omega) + K^-1)^-1 = K - K W^1/2 B^-1 W^1/2 K``; ``B`` has
    eigenvalues ``>= 1`` and tolerates ``omega = 0`` entries.
    """
    sw = np.sqrt(np.asarray(omega, dtype=float))
    B = np.eye(K.shape[0]) + sw[:, None] * K * sw[None, :]
    return cholesky(B, "I + W^1/2 K W^1/2"), sw


def conditional_f(K: np.ndarray, omega, y1h, n) -> Gaussian:
    """``N(1/2 A (y' - n), A)`` with ``A = (diag(omega) + K^-1)^-1``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega < 0):
        raise ValueError("Polya-Gamma variables must be nonnegative")
    LB, sw = precision_factor(K, omega)
    V = solve_triangular(LB, sw[:, None] * K, lower=True)
    A = K - V.T @ V
    A = 0.5 * (A + A.T)
    r = 0.5 * (np.atleast_1d(y1h) - np.atleast_1d(n))
    return Gaussian(A @ r, A)


def conditional_lambda(n_i, C: int) -> GammaDist:
    n_i = np.asarray(n_i)
    if np.any(n_i < 0):
        raise ValueError("counts must be nonnegative")
    return GammaDist(1.0 + float(np.sum(n_i)), float(C))


def conditional_n(lam, f) -> PoissonDist:
    """``Po(lam * sigma(-f))``.

    The augmented likelihood carries ``sigma(-f)^n`` against ``Po(n | lam)``,
    so the count rate shrinks as the latent value grows.
    """
    if np.any(np.asarray(lam) < 0):
        raise ValueError("lambda must be nonnegative")
    return PoissonDist(np.asarray(lam) * expit(-np.asarray(f, dtype=float)))


def conditional_omega(y1h, n, f):
    """Shape and tilt of ``PG(y' + n, |f|)``."""
    return np.asarray(y1h) + np.asarray(n), np.abs(np.asarray(f, dtype=float))


# -- identity checks --------------------------------------------------------

def poisson_identity_check(f: float, lam: float, n_terms: int) -> float:
    """Truncated ``sum_{n=0}^{N} sigma(-f)^n Po(n | lam)``; tends to ``exp(-lam sigma(f))``."""
    if lam < 0 or n_terms < 1:
        raise ValueError("need lam >= 0 and n_terms >= 1")
    if lam == 0:
        return 1.0
    n = np.arange(n_terms + 1)
    log_terms = n * np.log(expit(-f)) + n * np.log(lam) - lam - gammaln(n + 1)
    return float(np.exp(log_terms).sum())


def gamma_identity_check(z: float) -> float:
    """Quadrature of ``int_0^Lam exp(-lam z) dlam`` with a tail below 1e-12."""
    if not z > 0:
        raise ValueError("z must be positive")
    upper = max(-np.log(1e-12 * z) / z, 1.0 / z)
    val, _ = integrate.quad(lambda t: np.exp(-t * z), 0.0, upper,
                            epsabs=1e-14, epsrel=1e-12, limit=200, points=[1.0 / z])
    return float(val)


def pg_laplace(b, t):
    """``E[exp(-t w)]`` for ``w ~ PG(b, 0)``: ``cosh(sqrt(t/2))^-b``."""
    return np.exp(-np.asarray(b) * np.log(np.cosh(np.sqrt(np.asarray(t) / 2.0))))


def augmented_marginal(f: float, lam: float, label_is_class: bool, n_max: int = 100) -> float:
    """Sum the augmented single-class factor over ``n`` and integrate ``w``.

    Returns ``sigma(f)^y' exp(-lam sigma(f))`` up to truncation; ``w`` is
    integrated exactly through the Polya-Gamma Laplace transform.
    """
    y = 1.0 if label_is_class else 0.0
    n = np.arange(n_max + 1)
    h = y + n
    log_po = n * np.log(lam) - lam - gammaln(n + 1) if lam > 0 else np.where(n == 0, 0.0, -np.inf)
    log_int = -h * np.log(2.0) + 0.5 * (y - n) * f - h * log_cosh_half(f)
    return float(np.exp(log_po + log_int).sum())


def gp_posterior_solve(K: np.ndarray, omega: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """``(diag(omega) + K^-1)^-1 rhs`` without inverting ``K``."""
    LB, sw = precision_factor(K, omega)
    Kr = K @ rhs
    return Kr - K @ (sw * cho_solve((LB, True), sw * Kr))
