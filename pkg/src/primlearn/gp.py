"""Scalar-input Gaussian-process regression with a squared-exponential kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotrf, dpotrs
from scipy.optimize import minimize
from scipy.stats import qmc

_LOG_2PI = math.log(2.0 * math.pi)
# log-parameter box (in units of the standardized data) used during fitting
_LOG_LO = math.log(1e-6)
_LOG_HI = math.log(1e6)


class IllConditioned(ArithmeticError):
    """Kernel matrix could not be factorized even with the maximum jitter."""


@dataclass(frozen=True)
class Hyperparams:
    signal_variance: float
    length_scale: float
    noise_variance: float

    def __post_init__(self):
        for name in ("signal_variance", "length_scale", "noise_variance"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    def to_log(self) -> np.ndarray:
        return np.log([self.signal_variance, self.length_scale, self.noise_variance])

    @classmethod
    def from_log(cls, theta) -> "Hyperparams":
        sf2, ell, sd2 = np.exp(np.asarray(theta, dtype=float))
        return cls(float(sf2), float(ell), float(sd2))

    def to_dict(self) -> dict:
        return {"signal_variance": self.signal_variance, "length_scale": self.length_scale,
                "noise_variance": self.noise_variance}


def kernel(t1, t2, h: Hyperparams) -> np.ndarray:
    """Squared-exponential covariance between every pair of ``t1`` and ``t2``."""
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    d = np.subtract.outer(t1, t2)
    return h.signal_variance * np.exp(-0.5 * d * d / (h.length_scale ** 2))


def _factor(V: np.ndarray, signal_variance: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor with jitter escalation; returns (L, jitter used)."""
    try:
        return cholesky(V, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    jitter = 1e-10 * signal_variance
    n = len(V)
    while jitter <= 1e-4 * signal_variance * (1 + 1e-9):
        try:
            return cholesky(V + jitter * np.eye(n), lower=True, check_finite=False), jitter
        except LinAlgError:
            jitter *= 10.0
    raise IllConditioned("kernel matrix is not positive definite (duplicate times or collapsed length scale?)")


def log_marginal_likelihood(times, values, h: Hyperparams) -> float:
    """log p(x | t, theta) = -1/2 x^T V^-1 x - 1/2 log|V| - n/2 log(2 pi)."""
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    V = kernel(t, t, h) + h.noise_variance * np.eye(len(t))
    L, _ = _factor(V, h.signal_variance)
    alpha = cho_solve((L, True), x, check_finite=False)
    return float(-0.5 * x @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * len(t) * _LOG_2PI)


def _nll(theta: np.ndarray, t: np.ndarray, x: np.ndarray, d2: np.ndarray) -> float:
    sf2, ell, sd2 = np.exp(theta)
    V = sf2 * np.exp(-0.5 / (ell * ell) * d2)
    V.flat[:: len(t) + 1] += sd2
    L, info = dpotrf(V, lower=1, clean=0, overwrite_a=1)
    if info != 0:
        return math.inf
    alpha, _ = dpotrs(L, x, lower=1)
    return float(0.5 * x @ alpha + np.sum(np.log(L.diagonal())) + 0.5 * len(t) * _LOG_2PI)


def _nll_and_grad(theta: np.ndarray, t: np.ndarray, x: np.ndarray, d2: np.ndarray):
    sf2, ell, sd2 = np.exp(theta)
    n = len(t)
    Kf = sf2 * np.exp(-0.5 * d2 / (ell * ell))
    V = Kf + sd2 * np.eye(n)
    try:
        L = cholesky(V, lower=True, check_finite=False)
    except LinAlgError:
        return math.inf, np.zeros(3)
    alpha = cho_solve((L, True), x, check_finite=False)
    nll = 0.5 * x @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * n * _LOG_2PI
    Vinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Vinv
    grad = np.array([
        0.5 * np.sum(W * Kf),
        0.5 * np.sum(W * Kf * d2) / (ell * ell),
        0.5 * sd2 * np.trace(W),
    ])
    return float(nll), -grad


class GPModel:
    """Zero-mean GP posterior conditioned on ``(times, values)``.

    The Cholesky factor of V = K(t, t) + noise * I and the weight vector
    V^-1 x are computed once at construction.
    """

    def __init__(self, hyperparams: Hyperparams, train_times=(), train_values=()):
        self.hyperparams = hyperparams
        self.train_times = np.asarray(train_times, dtype=float).reshape(-1)
        self.train_values = np.asarray(train_values, dtype=float).reshape(-1)
        if self.train_times.shape != self.train_values.shape:
            raise ValueError("times and values must have the same length")
        if len(self.train_times) > 1 and np.any(np.diff(self.train_times) <= 0):
            raise ValueError("train times must be strictly increasing")
        h = hyperparams
        n = len(self.train_times)
        if n:
            V = kernel(self.train_times, self.train_times, h) + h.noise_variance * np.eye(n)
            self.chol, self.jitter = _factor(V, h.signal_variance)
            self.weights = cho_solve((self.chol, True), self.train_values, check_finite=False)
        else:
            self.chol = np.zeros((0, 0))
            self.jitter = 0.0
            self.weights = np.zeros(0)

    @property
    def prior_variance(self) -> float:
        return self.hyperparams.signal_variance + self.hyperparams.noise_variance

    def predict(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Posterior predictive mean and variance (observation noise included) at ``t``."""
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tq = t.reshape(-1)
        prior = self.prior_variance
        if len(self.train_times) == 0:
            mean = np.zeros_like(tq)
            var = np.full_like(tq, prior)
        else:
            Ks = kernel(tq, self.train_times, self.hyperparams)
            mean = Ks @ self.weights
            v = solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
            var = prior - np.sum(v * v, axis=0)
            var = np.clip(var, np.finfo(float).tiny, prior)
        if scalar:
            return float(mean[0]), float(var[0])
        return mean.reshape(t.shape), var.reshape(t.shape)

    def log_marginal_likelihood(self) -> float:
        return log_marginal_likelihood(self.train_times, self.train_values, self.hyperparams)

    def to_dict(self) -> dict:
        return {"hyperparams": self.hyperparams.to_dict(),
                "train_times": self.train_times.tolist(),
                "train_values": self.train_values.tolist()}

    @classmethod
    def from_dict(cls, d) -> "GPModel":
        return cls(Hyperparams(**d["hyperparams"]), d["train_times"], d["train_values"])


# simplex size in log space; the MLL tolerance is the binding stop rule and the
# gradient polish finishes the winning start
_XATOL = 1e-4


def fit(times, values, init: Hyperparams | None = None, n_starts: int = 8,
        maxiter: int = 500, tol: float = 1e-8, seed: int = 0, polish: bool = True) -> GPModel:
    """Empirical-Bayes fit of the hyperparameters followed by conditioning.

    Multi-start Nelder-Mead in log-parameter space (``init`` plus a Latin
    hypercube over [1e-3, 1e3] per parameter, relative to the standardized
    data), then a gradient polish of the best start.
    """
    t = np.asarray(times, dtype=float).reshape(-1)
    x = np.asarray(values, dtype=float).reshape(-1)
    if len(t) < 3:
        raise ValueError("need at least 3 points to fit")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")

    scale = float(np.std(x))
    if not scale > 0:
        scale = max(float(np.max(np.abs(x))), 1.0)
    xs = x / scale
    log_s2 = 2.0 * math.log(scale)
    shift = np.array([log_s2, 0.0, log_s2])
    d2 = np.subtract.outer(t, t) ** 2
    bounds = [(_LOG_LO, _LOG_HI)] * 3

    def nll(theta):
        return _nll(theta, t, xs, d2)

    starts = []
    if init is not None:
        starts.append(np.clip(init.to_log() - shift, _LOG_LO, _LOG_HI))
    if n_starts > 0:
        lhs = qmc.LatinHypercube(d=3, seed=seed).random(n_starts)
        starts.extend(math.log(1e-3) + lhs * (math.log(1e3) - math.log(1e-3)))

    best_theta, best_val = None, math.inf
    for s in starts:
        r = minimize(nll, s, method="Nelder-Mead", bounds=bounds,
                     options={"maxiter": maxiter, "xatol": _XATOL, "fatol": tol})
        if r.fun < best_val:
            best_theta, best_val = r.x, float(r.fun)
    if best_theta is None or not math.isfinite(best_val):
        raise IllConditioned("no start produced a finite marginal likelihood")

    if polish:
        r = minimize(_nll_and_grad, best_theta, args=(t, xs, d2), jac=True, method="L-BFGS-B",
                     bounds=bounds, options={"maxiter": 200, "ftol": 1e-15, "gtol": 1e-9})
        if math.isfinite(r.fun) and r.fun <= best_val:
            best_theta = r.x

    h = Hyperparams.from_log(best_theta + shift)
    return GPModel(h, t, x)
