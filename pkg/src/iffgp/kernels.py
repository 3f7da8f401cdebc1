"""Stationary kernels and their spectral densities.

Spectral densities use the ordinary-frequency convention

    s(xi) = integral k(tau) exp(-2 pi i tau . xi) dtau,

so that ``integral s(xi) dxi == k(0)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .errors import (
    DegenerateTailError,
    InvalidArgumentError,
    TruncationWarning,
    UnsupportedFamilyError,
)

FAMILIES = ("se", "matern12", "matern32", "matern52", "product")
BASE_FAMILIES = ("se", "matern12", "matern32", "matern52")

MATERN_NU = {"matern12": 0.5, "matern32": 1.5, "matern52": 2.5}

# Known spectral tail exponents of the 1D densities (tail mass ~ rho^-q).
TAIL_EXPONENT = {"matern12": 1.0, "matern32": 3.0, "matern52": 5.0}

# Half-width of the default lag grid, in lengthscales; |k| there is < 1e-15 k(0).
_DFT_HALFWIDTH = {"se": 10.0, "matern12": 36.0, "matern32": 24.0, "matern52": 20.0}
_DFT_STEPS_PER_LENGTHSCALE = 256
DFT_CLAMP_RELATIVE = 1e-12
DFT_EDGE_RELATIVE = 1e-6
_GRAM_BLOCK = 4_000_000


def _profile(family: str, r: np.ndarray) -> np.ndarray:
    """Unit-variance correlation as a function of scaled distance r >= 0."""
    if family == "se":
        return np.exp(-0.5 * r**2)
    if family == "matern12":
        return np.exp(-r)
    if family == "matern32":
        a = math.sqrt(3.0) * r
        return (1.0 + a) * np.exp(-a)
    if family == "matern52":
        a = math.sqrt(5.0) * r
        return (1.0 + a + a**2 / 3.0) * np.exp(-a)
    raise UnsupportedFamilyError(f"unknown kernel family {family!r}")


def _log_density_1d(family: str, lengthscale: float, xi: np.ndarray) -> np.ndarray:
    """Log spectral density of a unit-variance 1D kernel."""
    if family == "se":
        return math.log(math.sqrt(2.0 * math.pi) * lengthscale) - 2.0 * math.pi**2 * (lengthscale * xi) ** 2
    return _log_matern_density(MATERN_NU[family], np.atleast_1d(lengthscale), xi[..., None])


def _log_matern_density(nu: float, lengthscales: np.ndarray, xi: np.ndarray) -> np.ndarray:
    d = lengthscales.shape[0]
    log_c = (
        d * math.log(2.0)
        + 0.5 * d * math.log(math.pi)
        + gammaln(nu + 0.5 * d)
        + nu * math.log(2.0 * nu)
        - gammaln(nu)
    )
    scaled2 = np.sum((lengthscales * xi) ** 2, axis=-1)
    return log_c + np.sum(np.log(lengthscales)) - (nu + 0.5 * d) * np.log(2.0 * nu + 4.0 * math.pi**2 * scaled2)


def _as_points(a, dim: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        a = a[..., None]
    if a.shape[-1] != dim:
        raise InvalidArgumentError(f"expected trailing dimension {dim}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Kernel:
    """A stationary kernel ``variance * rho(tau / lengthscales)``.

    ``family`` is one of ``se``, ``matern12``, ``matern32``, ``matern52`` (isotropic in
    the lengthscale-scaled distance) or ``product``, in which case ``factors`` names the
    1D family used along each input dimension.
    """

    family: str
    lengthscales: tuple
    variance: float = 1.0
    factors: Optional[tuple] = None

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(np.asarray(self.lengthscales, dtype=float)))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if self.family not in FAMILIES:
            raise UnsupportedFamilyError(f"unknown kernel family {self.family!r}")
        if not ls or not all(np.isfinite(ls)) or min(ls) <= 0:
            raise InvalidArgumentError(f"lengthscales must be positive and finite, got {ls}")
        # zero variance is allowed: it describes a degenerate (noise-only) prior
        if not np.isfinite(self.variance) or self.variance < 0:
            raise InvalidArgumentError(f"variance must be nonnegative, got {self.variance}")
        if self.family == "product":
            if self.factors is None or len(self.factors) != len(ls):
                raise InvalidArgumentError("product kernels need one factor family per dimension")
            factors = tuple(self.factors)
            bad = [f for f in factors if f not in BASE_FAMILIES]
            if bad:
                raise UnsupportedFamilyError(f"unknown factor families {bad}")
            object.__setattr__(self, "factors", factors)
        elif self.factors is not None:
            raise InvalidArgumentError("factors only apply to the product family")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    @property
    def separable(self) -> bool:
        return self.family in ("se", "product") or self.dim == 1

    def factor_families(self) -> tuple:
        if self.family == "product":
            return self.factors
        return (self.family,) * self.dim

    def with_params(self, lengthscales=None, variance=None) -> "Kernel":
        return replace(
            self,
            lengthscales=self.lengthscales if lengthscales is None else lengthscales,
            variance=self.variance if variance is None else variance,
        )

    def __call__(self, tau) -> np.ndarray:
        tau = _as_points(tau, self.dim)
        if not np.all(np.isfinite(tau)):
            raise InvalidArgumentError("kernel lag contains non-finite values")
        scaled = tau / np.asarray(self.lengthscales)
        if self.family == "product":
            out = np.ones(scaled.shape[:-1])
            for d, fam in enumerate(self.factors):
                out = out * _profile(fam, np.abs(scaled[..., d]))
            return self.variance * out
        r = np.sqrt(np.sum(scaled**2, axis=-1))
        return self.variance * _profile(self.family, r)

    def gram(self, X1, X2=None) -> np.ndarray:
        X1 = _as_points(X1, self.dim)
        X2 = X1 if X2 is None else _as_points(X2, self.dim)
        # row blocks keep the (rows, cols, D) lag array near 32 MB
        rows = max(1, _GRAM_BLOCK // max(1, X2.shape[0] * self.dim))
        if X1.shape[0] <= rows:
            return self(X1[:, None, :] - X2[None, :, :])
        out = np.empty((X1.shape[0], X2.shape[0]))
        for i in range(0, X1.shape[0], rows):
            out[i:i + rows] = self(X1[i:i + rows, None, :] - X2[None, :, :])
        return out

    def diag(self, X) -> np.ndarray:
        X = _as_points(X, self.dim)
        return np.full(X.shape[0], self.variance)

    def log_spectral_density(self, xi) -> np.ndarray:
        xi = _as_points(xi, self.dim)
        if self.variance == 0:
            return np.full(xi.shape[:-1], -np.inf)
        log_var = math.log(self.variance)
        if self.family == "se" or self.family == "product":
            out = np.zeros(xi.shape[:-1])
            for d, fam in enumerate(self.factor_families()):
                out = out + _log_density_1d(fam, self.lengthscales[d], xi[..., d])
            return log_var + out
        return log_var + _log_matern_density(MATERN_NU[self.family], np.asarray(self.lengthscales), xi)

    def spectral_density(self, xi) -> np.ndarray:
        return np.exp(self.log_spectral_density(xi))


def kernel_eval(kernel: Kernel, tau) -> float:
    """k(tau) for a single lag vector."""
    tau = np.asarray(tau, dtype=float).reshape(-1)
    if tau.size != kernel.dim:
        raise InvalidArgumentError(f"lag must have {kernel.dim} entries, got {tau.size}")
    return float(kernel(tau[None, :])[0])


def spectral_density_closed(kernel: Kernel, xi) -> np.ndarray:
    if kernel.family not in FAMILIES:
        raise UnsupportedFamilyError(f"no closed-form density for {kernel.family!r}")
    return kernel.spectral_density(xi)


class SpectralDensity:
    """Callable ``s(xi)`` with ``xi`` shaped ``(..., dim)`` (or plain arrays when dim == 1)."""

    provenance = "abstract"
    dim = 1
    total_variance = 1.0

    def __call__(self, xi) -> np.ndarray:
        raise NotImplementedError


class ClosedFormDensity(SpectralDensity):
    provenance = "closed_form"

    def __init__(self, kernel: Kernel):
        self.kernel = kernel
        self.dim = kernel.dim
        self.total_variance = kernel.variance

    def __call__(self, xi) -> np.ndarray:
        return self.kernel.spectral_density(xi)


class DFTDensity(SpectralDensity):
    """Spectral density from regularly spaced kernel samples.

    ``samples`` hold ``k(j * spacing)`` for ``j = -J..J``. Values on the frequency grid
    ``j / width`` come from one FFT; other frequencies use the equivalent trapezoid sum,
    so both agree exactly on the grid.
    """

    provenance = "dft_numeric"

    def __init__(self, samples, spacing: float, width: Optional[float] = None):
        samples = np.asarray(samples, dtype=float).reshape(-1)
        if samples.size == 0:
            raise InvalidArgumentError("no kernel samples given")
        if samples.size % 2 == 0 or samples.size < 3:
            raise InvalidArgumentError("samples must lie on a grid symmetric about zero (odd length >= 3)")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("kernel samples contain non-finite values")
        if not spacing > 0:
            raise InvalidArgumentError("spacing must be positive")
        span = (samples.size - 1) * spacing
        if width is not None and not math.isclose(width, span, rel_tol=1e-9):
            raise InvalidArgumentError(f"width {width} does not match the sample span {span}")
        half = samples.size // 2
        # one-sided samples k(0), k(h), ..., k(Jh), averaging the two halves
        self.one_sided = 0.5 * (samples[half:] + samples[half::-1])
        self.spacing = float(spacing)
        self.width = span
        self.dim = 1
        self.total_variance = float(self.one_sided[0])

        k0 = abs(self.one_sided[0])
        self.truncated = bool(abs(self.one_sided[-1]) > DFT_EDGE_RELATIVE * k0)
        if self.truncated:
            warnings.warn(
                f"kernel at lag {span / 2:g} is {abs(self.one_sided[-1]):.3g}, above "
                f"{DFT_EDGE_RELATIVE:g} k(0); widen the lag grid",
                TruncationWarning,
                stacklevel=2,
            )

        J = half
        periodic = np.concatenate([self.one_sided, self.one_sided[-2:0:-1]])
        values = self.spacing * np.fft.fft(periodic).real
        values = 0.5 * (values + values[(-np.arange(2 * J)) % (2 * J)])
        freqs = np.fft.fftfreq(2 * J, d=self.spacing)
        order = np.argsort(freqs, kind="stable")
        self.frequencies = freqs[order]
        raw = values[order]
        vmax = float(raw.max()) if raw.size else 0.0
        self.floor = max(DFT_CLAMP_RELATIVE * vmax, 0.0)
        self.values = np.maximum(raw, self.floor)

    def __call__(self, xi) -> np.ndarray:
        xi = _as_points(xi, 1)[..., 0]
        flat = xi.reshape(-1)
        J = self.one_sided.size - 1
        weights = np.full(J + 1, 2.0)
        weights[0] = 1.0
        weights[-1] = 1.0
        coeffs = self.spacing * weights * self.one_sided
        lags = self.spacing * np.arange(J + 1)
        out = np.empty(flat.size)
        chunk = max(1, 2_000_000 // (J + 1))
        for start in range(0, flat.size, chunk):
            block = flat[start:start + chunk]
            out[start:start + chunk] = np.cos(2.0 * math.pi * np.outer(block, lags)) @ coeffs
        return np.maximum(out, self.floor).reshape(xi.shape)


class ProductDensity(SpectralDensity):
    """Product of per-dimension 1D densities times an overall variance."""

    provenance = "dft_numeric"

    def __init__(self, factors: Sequence[SpectralDensity], variance: float):
        self.factors = list(factors)
        self.dim = len(self.factors)
        self.total_variance = float(variance)

    def __call__(self, xi) -> np.ndarray:
        xi = _as_points(xi, self.dim)
        out = np.full(xi.shape[:-1], self.total_variance)
        for d, f in enumerate(self.factors):
            out = out * f(xi[..., d])
        return out


def spectral_density_dft(kernel_samples, spacing: float, width: Optional[float] = None) -> DFTDensity:
    return DFTDensity(kernel_samples, spacing, width)


def default_lag_grid(family: str, lengthscale: float) -> np.ndarray:
    h = lengthscale / _DFT_STEPS_PER_LENGTHSCALE
    J = int(round(_DFT_HALFWIDTH[family] * _DFT_STEPS_PER_LENGTHSCALE))
    return h * np.arange(-J, J + 1)


def dft_density(kernel: Kernel) -> SpectralDensity:
    """Numeric spectral density of ``kernel`` on its default lag grid."""
    if not kernel.separable:
        raise UnsupportedFamilyError(
            f"DFT density needs a separable kernel; {kernel.family} in {kernel.dim}D is not"
        )
    factors = []
    for fam, ls in zip(kernel.factor_families(), kernel.lengthscales):
        lags = default_lag_grid(fam, ls)
        unit = Kernel(fam, (ls,), 1.0)
        factors.append(DFTDensity(unit(lags), lags[1] - lags[0]))
    if kernel.dim == 1 and kernel.variance == 1.0:
        return factors[0]
    return ProductDensity(factors, kernel.variance)


def density_for(kernel: Kernel, method: str = "closed") -> SpectralDensity:
    if method == "closed":
        return ClosedFormDensity(kernel)
    if method == "dft":
        return dft_density(kernel)
    raise InvalidArgumentError(f"unknown density method {method!r}")


@dataclass(frozen=True)
class TailEstimate:
    q: float
    beta: float
    rho: np.ndarray = field(repr=False, compare=False)
    tail_mass: np.ndarray = field(repr=False, compare=False)


def tail_mass(density: SpectralDensity, rho: float) -> float:
    """Normalised one-sided tail mass of a 1D density beyond ``rho``."""
    val, _ = integrate.quad(lambda t: float(np.asarray(density(t)).reshape(-1)[0]), rho, np.inf, limit=200, epsabs=0.0, epsrel=1e-10)
    if not density.total_variance > 0:
        return 0.0
    return val / density.total_variance


def tail_exponent_estimate(density: SpectralDensity, rho_grid) -> TailEstimate:
    """Fit ``tail_mass(rho) <= beta * rho**-q`` by least squares on log-log axes."""
    rho = np.asarray(rho_grid, dtype=float).reshape(-1)
    if rho.size < 2 or np.any(rho <= 0) or np.any(np.diff(rho) <= 0):
        raise InvalidArgumentError("rho_grid must be positive and strictly increasing")
    mass = np.array([tail_mass(density, r) for r in rho])
    if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
        bad = rho[~(mass > 0)]
        raise DegenerateTailError(f"nonpositive tail mass at rho={bad.tolist()}")
    slope, _ = np.polyfit(np.log(rho), np.log(mass), 1)
    q = -float(slope)
    if q <= 0:
        raise DegenerateTailError(f"tail mass does not decay on this grid (slope {slope:.3g})")
    beta = float(np.max(mass * rho**q))
    return TailEstimate(q=q, beta=beta, rho=rho, tail_mass=mass)
