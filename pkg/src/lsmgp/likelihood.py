"""Logistic-softmax likelihood and its Gaussian predictive integral."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit, log_expit, ndtri
from scipy.stats import qmc

SAMPLERS = ("monte-carlo", "quasi-monte-carlo")


def sigmoid(z):
    return expit(z)


def logistic_softmax(f: np.ndarray) -> np.ndarray:
    """``sigma(f_k) / sum_c sigma(f_c)`` along the last axis.

    Evaluated in log-space so that large ``|f|`` neither overflows nor loses
    the small probabilities.
    """
    f = np.asarray(f, dtype=float)
    if f.shape[-1] < 2:
        raise ValueError("logistic-softmax needs at least two classes")
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite latent values")
    return _lsm(f)


def _lsm(f):
    logs = log_expit(f)
    logs = logs - logs.max(axis=-1, keepdims=True)
    p = np.exp(logs)
    return p / p.sum(axis=-1, keepdims=True)


def _standard_normals(shape, n_samples, sampler, rng):
    """``(n_samples,) + shape`` standard normal draws."""
    if sampler == "monte-carlo":
        return rng.standard_normal((n_samples,) + shape)
    if sampler == "quasi-monte-carlo":
        d = int(np.prod(shape))
        seed = rng.integers(2**63 - 1)
        eng = qmc.Sobol(d, scramble=True, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            u = eng.random(n_samples)
        u = np.clip(u, 1e-15, 1 - 1e-15)
        return ndtri(u).reshape((n_samples,) + shape)
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def predict_proba(mean, var, n_samples: int = 1000, sampler: str = "monte-carlo",
                  rng=None, chunk: int = 256) -> np.ndarray:
    """Monte Carlo estimate of ``E[logistic_softmax(f)]`` with independent
    ``f_c ~ N(mean_c, var_c)``.

    ``mean`` and ``var`` are ``(C,)`` or ``(n, C)``. For the quasi-Monte Carlo
    sampler every point uses a scrambled Sobol sequence over the ``C`` class
    dimensions.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if mean.shape != var.shape:
        raise ValueError("mean and variance shapes differ")
    if np.any(var < 0):
        raise ValueError("negative predictive variance")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(rng)
    single = mean.ndim == 1
    mean2 = np.atleast_2d(mean)
    sd2 = np.sqrt(np.atleast_2d(var))
    out = np.empty_like(mean2)
    C = mean2.shape[1]
    for start in range(0, mean2.shape[0], chunk):
        m = mean2[start:start + chunk]
        s = sd2[start:start + chunk]
        if not np.any(s):
            out[start:start + chunk] = logistic_softmax(m)
            continue
        if sampler == "quasi-monte-carlo":
            eps = np.stack([_standard_normals((C,), n_samples, sampler, rng) for _ in range(m.shape[0])], axis=1)
        else:
            eps = _standard_normals(m.shape, n_samples, sampler, rng)
        out[start:start + chunk] = _lsm(m + s * eps).mean(axis=0)
    return out[0] if single else out


def classify(probs: np.ndarray):
    """Index of the most probable class; ties go to the lowest index."""
    return np.argmax(np.asarray(probs), axis=-1)
