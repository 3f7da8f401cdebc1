"""Exact GP inference and the collapsed variational objective.

The collapsed objective only needs the data summaries ``nu2 = y.y``,
``ybar = Kuf y`` and ``phi = Kuf Kuf^T``; with those in hand every evaluation is a
single M x M Cholesky. ``kuu`` is either a 1D array (diagonal prior covariance, the
IFF case; ``inf`` entries mark features with no prior variance) or a dense matrix
(inducing points).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import InvalidArgumentError, NegativeTraceWarning, NumericalFailure
from .features import FrequencyGrid, feature_matrix
from .kernels import Kernel, SpectralDensity

LOG_2PI = math.log(2.0 * math.pi)
JITTER_LADDER = (1e-10, 1e-8, 1e-6)
DENSE_LIMIT = 5000
# inducing-point Gram matrices are often numerically singular; a larger floor keeps the
# trace term and the whitened solve accurate enough to stay below the exact marginal
INDUCING_JITTER = (1e-8, 1e-6, 1e-4)


def cholesky(A: np.ndarray, ladder=(0.0,) + JITTER_LADDER) -> np.ndarray:
    """Lower Cholesky factor, escalating a jitter relative to the mean diagonal."""
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NumericalFailure("matrix has non-finite entries")
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not scale > 0:
        scale = 1.0
    eye = np.eye(A.shape[0])
    for jitter in ladder:
        try:
            return linalg.cholesky(A + (jitter * scale) * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise NumericalFailure(f"Cholesky failed with jitter up to {ladder[-1]:g}")


@dataclass(frozen=True)
class VariationalState:
    mu_u: np.ndarray
    sigma_u: np.ndarray


@dataclass(frozen=True)
class ObjectiveValue:
    log_det: float
    quad: float
    trace: float
    const: float
    warnings: tuple = ()

    @property
    def total(self) -> float:
        return self.log_det + self.quad + self.trace + self.const

    def __float__(self) -> float:
        return self.total


@dataclass(frozen=True)
class PredictiveMarginals:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class _Whitened:
    """``Kuu = W^-1 W^-T``; ``whiten(v) = W v`` and ``unwhiten(v) = W^-1 v``."""

    kuu: np.ndarray
    chol: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = field(default=None)

    @classmethod
    def of(cls, kuu, ladder=(0.0,) + JITTER_LADDER) -> "_Whitened":
        kuu = np.asarray(kuu, dtype=float)
        if kuu.ndim == 1:
            if np.any(np.isnan(kuu)) or np.any(kuu <= 0):
                raise NumericalFailure("diagonal prior covariance must be positive")
            with np.errstate(divide="ignore", over="ignore"):
                d = 1.0 / np.sqrt(kuu)
            return cls(kuu, d=d)
        return cls(kuu, chol=cholesky(kuu, ladder))

    def whiten(self, v: np.ndarray) -> np.ndarray:
        if self.d is not None:
            return self.d.reshape((-1,) + (1,) * (v.ndim - 1)) * v
        return linalg.solve_triangular(self.chol, v, lower=True, check_finite=False)

    def whiten_sym(self, phi: np.ndarray) -> np.ndarray:
        if self.d is not None:
            return self.d[:, None] * phi * self.d[None, :]
        half = self.whiten(phi)
        return self.whiten(half.T).T

    def unwhiten(self, v: np.ndarray) -> np.ndarray:
        if self.d is not None:
            return np.sqrt(self.kuu).reshape((-1,) + (1,) * (v.ndim - 1)) * v
        return self.chol @ v


def _check_noise(noise: float) -> float:
    noise = float(noise)
    if not np.isfinite(noise) or noise <= 0:
        raise InvalidArgumentError(f"noise variance must be positive, got {noise}")
    return noise


def _check_dense(n: int, dense_limit: int):
    if n > dense_limit:
        raise InvalidArgumentError(f"N={n} exceeds the dense limit {dense_limit}")


def exact_log_marginal(X, y, kernel: Kernel, noise: float, dense_limit: int = DENSE_LIMIT) -> float:
    """``log N(y | 0, Kff + noise I)``."""
    noise = _check_noise(noise)
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_dense(y.size, dense_limit)
    K = kernel.gram(X)
    K[np.diag_indices_from(K)] += noise
    L = cholesky(K)
    del K
    alpha = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * y.size * LOG_2PI)


def exact_predict(X, y, kernel: Kernel, noise: float, Xstar, dense_limit: int = DENSE_LIMIT) -> PredictiveMarginals:
    noise = _check_noise(noise)
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_dense(y.size, dense_limit)
    K = kernel.gram(X)
    K[np.diag_indices_from(K)] += noise
    L = cholesky(K)
    Ksf = kernel.gram(Xstar, X)
    A = linalg.solve_triangular(L, Ksf.T, lower=True, check_finite=False)
    alpha = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    mean = A.T @ alpha
    var = kernel.diag(Xstar) - np.sum(A**2, axis=0)
    return PredictiveMarginals(mean, var)


def collapsed_objective(summary, kuu, noise: float, trace_t: float, n: Optional[int] = None) -> ObjectiveValue:
    """Collapsed bound from data summaries via Woodbury and the determinant lemma."""
    noise = _check_noise(noise)
    n = summary.n if n is None else int(n)
    ybar = np.asarray(summary.ybar, dtype=float)
    phi = np.asarray(summary.phi, dtype=float)
    notes = []
    if ybar.size:
        kuu = np.asarray(kuu, dtype=float)
        if kuu.shape[0] != ybar.size:
            raise InvalidArgumentError(f"kuu has {kuu.shape[0]} features, summary has {ybar.size}")
        w = _Whitened.of(kuu)
        B = w.whiten_sym(phi) / noise
        B[np.diag_indices_from(B)] += 1.0
        LB = cholesky(B, ladder=(0.0,) + JITTER_LADDER)
        logdet_b = 2.0 * float(np.sum(np.log(np.diag(LB))))
        c = linalg.solve_triangular(LB, w.whiten(ybar), lower=True, check_finite=False)
        inner = float(c @ c)
    else:
        logdet_b, inner = 0.0, 0.0
    if not np.isfinite(trace_t):
        raise NumericalFailure("trace term is not finite")
    if trace_t < 0:
        notes.append(f"negative trace term {trace_t:.3g} clamped to 0")
    return ObjectiveValue(
        log_det=-0.5 * (logdet_b + n * math.log(noise)),
        quad=-0.5 * (summary.nu2 / noise - inner / noise**2),
        trace=-0.5 * max(trace_t, 0.0) / noise,
        const=-0.5 * n * LOG_2PI,
        warnings=tuple(notes),
    )


def optimal_qu_from_summary(summary, kuu, noise: float) -> VariationalState:
    noise = _check_noise(noise)
    w = _Whitened.of(kuu)
    B = w.whiten_sym(np.asarray(summary.phi, dtype=float)) / noise
    B[np.diag_indices_from(B)] += 1.0
    LB = cholesky(B, ladder=(0.0,) + JITTER_LADDER)
    Binv = linalg.cho_solve((LB, True), np.eye(B.shape[0]), check_finite=False)
    # Sigma_u = W^-1 B^-1 W^-T ; mu_u = W^-1 B^-1 W ybar / noise
    sigma = w.unwhiten(w.unwhiten(Binv).T).T
    sigma = 0.5 * (sigma + sigma.T)
    mu = w.unwhiten(Binv @ w.whiten(np.asarray(summary.ybar, dtype=float))) / noise
    return VariationalState(mu, sigma)


def optimal_qu(kuu, kuf, y, noise: float) -> VariationalState:
    """Optimal Gaussian q(u) given prior covariance ``kuu`` and cross-covariance ``kuf``."""
    from .precompute import summaries_from_features

    return optimal_qu_from_summary(summaries_from_features(kuf, y), kuu, noise)


def sparse_predict(state: VariationalState, kuu, kus, kernel: Kernel, Xstar) -> PredictiveMarginals:
    """Predictive marginals of f at ``Xstar`` given feature cross-covariances ``kus``."""
    kss = kernel.diag(Xstar)
    return predict_from_features(state, kuu, kus, kss)


def predict_from_features(state: VariationalState, kuu, kus, kss) -> PredictiveMarginals:
    kus = np.asarray(kus, dtype=float)
    kuu = np.asarray(kuu, dtype=float)
    if state.mu_u.shape[0] != kus.shape[0] or kuu.shape[0] != kus.shape[0]:
        raise InvalidArgumentError("variational state, kuu and kus disagree on the feature count")
    if kuu.ndim == 1:
        alpha = kus / kuu[:, None]
    else:
        alpha = linalg.cho_solve((cholesky(kuu), True), kus, check_finite=False)
    mean = alpha.T @ state.mu_u
    var = np.asarray(kss, dtype=float) - np.sum(kus * alpha, axis=0) + np.sum(alpha * (state.sigma_u @ alpha), axis=0)
    return PredictiveMarginals(mean, var)


def iff_trace(n: int, k0: float, grid: FrequencyGrid, s_half: np.ndarray) -> float:
    # cos^2 + sin^2 = 1 collapses the elementwise sum to a data-independent one
    return float(n * k0 - n * 2.0 * grid.cell_volume * np.sum(s_half))


def trace_term(kernel: Kernel, X, grid: FrequencyGrid, density: SpectralDensity) -> float:
    """Approximate trace ``sum_n k(x_n, x_n) - N eps^D sum_full s(z_m)``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    kdiag = float(np.sum(kernel.diag(X)))
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    t = kdiag - n * 2.0 * grid.cell_volume * float(np.sum(s))
    if t < 0:
        warnings.warn(f"approximate trace term is negative ({t:.3g})", NegativeTraceWarning, stacklevel=2)
    return t


def inducing_gram(kernel: Kernel, Z) -> tuple:
    """Jittered ``Kuu`` for inducing points ``Z`` and its lower Cholesky factor."""
    Kuu = kernel.gram(Z)
    scale = float(np.mean(np.diag(Kuu)))
    for jitter in INDUCING_JITTER:
        Kj = Kuu + (jitter * scale) * np.eye(Kuu.shape[0])
        try:
            return Kj, linalg.cholesky(Kj, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise NumericalFailure(f"Cholesky of Kuu failed with jitter up to {INDUCING_JITTER[-1]:g}")


def sgpr_terms(X, y, kernel: Kernel, Z):
    """Summaries, dense ``Kuu`` and exact trace for inducing points ``Z``."""
    from .precompute import summaries_from_features

    X = np.asarray(X, dtype=float)
    Kj, L = inducing_gram(kernel, Z)
    Kuf = kernel.gram(Z, X)
    V = linalg.solve_triangular(L, Kuf, lower=True, check_finite=False)
    trace = float(np.sum(kernel.diag(X)) - np.sum(V**2))
    # the jittered matrix is returned so the objective uses the same prior as the trace
    return summaries_from_features(Kuf, y), Kj, trace


def sgpr_inducing_objective(X, y, kernel: Kernel, noise: float, Z) -> ObjectiveValue:
    """Collapsed variational bound with inducing points ``Z``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    from .precompute import summaries_from_features

    X = np.asarray(X, dtype=float)
    _, L = inducing_gram(kernel, Z)
    V = linalg.solve_triangular(L, kernel.gram(Z, X), lower=True, check_finite=False)
    trace = float(np.sum(kernel.diag(X)) - np.sum(V**2))
    # whitening the features, not Kuf Kfu, avoids squaring the condition number of Kuu
    return collapsed_objective(summaries_from_features(V, y), np.ones(V.shape[0]), noise, trace)


def iff_objective(summary, grid: FrequencyGrid, kernel: Kernel, noise: float, density: SpectralDensity) -> ObjectiveValue:
    """IFF objective from precomputed summaries; cost independent of N."""
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    prec = 2.0 * grid.cell_volume * s
    with np.errstate(divide="ignore", over="ignore"):
        kuu = np.concatenate([1.0 / prec, 1.0 / prec])
    trace = iff_trace(summary.n, kernel.variance, grid, s)
    return collapsed_objective(summary, kuu, noise, trace)


# Features whose prior variance exceeds this carry no usable signal (density underflow).
_MAX_PRIOR_VARIANCE = 1e150


def iff_predict(summary, grid: FrequencyGrid, kernel: Kernel, noise: float, density: SpectralDensity, Xstar) -> PredictiveMarginals:
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    with np.errstate(divide="ignore", over="ignore"):
        half_kuu = 1.0 / (2.0 * grid.cell_volume * s)
    keep_half = half_kuu < _MAX_PRIOR_VARIANCE
    keep = np.concatenate([keep_half, keep_half])
    kuu = np.concatenate([half_kuu, half_kuu])[keep]
    sub = _SubSummary(summary.nu2, summary.ybar[keep], summary.phi[np.ix_(keep, keep)], summary.n)
    state = optimal_qu_from_summary(sub, kuu, noise)
    kus = feature_matrix(grid, Xstar)[keep]
    return predict_from_features(state, kuu, kus, kernel.diag(Xstar))


@dataclass(frozen=True)
class _SubSummary:
    nu2: float
    ybar: np.ndarray
    phi: np.ndarray
    n: int
