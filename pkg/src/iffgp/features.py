"""Integrated Fourier feature grids and feature maps.

Frequencies sit at the centres of disjoint boxes of width ``eps`` on a regular grid
that is antisymmetric about the origin. Each ``+z/-z`` pair is represented by one
cosine and one sine feature, so the cross-covariances with the data do not depend on
any kernel hyperparameter; all hyperparameter dependence lives in the diagonal prior
covariance of the features.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateInputError, DegenerateSpectrumError, InvalidArgumentError
from .kernels import SpectralDensity

MASKS = ("full", "spherical")
EPS_FACTOR = 0.95


def default_epsilon(X) -> np.ndarray:
    """Per-dimension box width ``0.95 / (max x_d - min x_d)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise DegenerateInputError("need at least two inputs to set eps")
    width = X.max(axis=0) - X.min(axis=0)
    if np.any(width <= 0):
        raise DegenerateInputError(f"zero input range in dimensions {np.flatnonzero(width <= 0).tolist()}")
    return EPS_FACTOR / width


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    """Half of an antisymmetric frequency grid; the other half is ``-half_frequencies``."""

    eps: np.ndarray
    half_frequencies: np.ndarray
    per_dim_count: int
    mask: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "eps", _readonly(np.atleast_1d(self.eps)))
        half = np.asarray(self.half_frequencies, dtype=float).reshape(-1, self.eps.size)
        object.__setattr__(self, "half_frequencies", _readonly(half))

    @property
    def dim(self) -> int:
        return self.eps.size

    @property
    def num_pairs(self) -> int:
        return self.half_frequencies.shape[0]

    @property
    def num_features(self) -> int:
        return 2 * self.num_pairs

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.eps))

    @property
    def full_frequencies(self) -> np.ndarray:
        return np.vstack([self.half_frequencies, -self.half_frequencies])

    def to_dict(self) -> dict:
        return {
            "eps": self.eps.tolist(),
            "per_dim_count": self.per_dim_count,
            "mask": self.mask,
            "half_frequencies": self.half_frequencies.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyGrid":
        eps = np.asarray(d["eps"], dtype=float)
        half = np.asarray(d["half_frequencies"], dtype=float).reshape(-1, eps.size)
        return cls(eps, half, int(d["per_dim_count"]), d.get("mask", "full"))

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.eps, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.half_frequencies, dtype="<f8").tobytes())
        return h.digest()

    def __eq__(self, other):
        if not isinstance(other, FrequencyGrid):
            return NotImplemented
        return (
            self.per_dim_count == other.per_dim_count
            and np.array_equal(self.eps, other.eps)
            and np.array_equal(self.half_frequencies, other.half_frequencies)
        )

    __hash__ = None


def _order(points: np.ndarray) -> np.ndarray:
    """Sort by Euclidean norm, ties broken lexicographically on the coordinates."""
    norm = np.sqrt(np.sum(points**2, axis=1))
    scale = norm.max() if norm.size else 1.0
    # rounding makes mathematically equal norms compare equal
    key_norm = np.round(norm / scale, 12) if scale > 0 else norm
    keys = [points[:, d] for d in reversed(range(points.shape[1]))] + [key_norm]
    return np.lexsort(keys)


def build_grid(
    per_dim_count: int,
    eps,
    dim: Optional[int] = None,
    mask: str = "full",
    target_pairs: Optional[int] = None,
) -> FrequencyGrid:
    """Regular grid ``z = (m - (n + 1) / 2) * eps`` for ``m = 1..n`` in each dimension.

    With ``mask="spherical"`` only the ``target_pairs`` pairs of smallest norm are kept.
    """
    if int(per_dim_count) != per_dim_count or per_dim_count < 2 or per_dim_count % 2:
        raise InvalidArgumentError(f"per_dim_count must be an even integer >= 2, got {per_dim_count}")
    per_dim_count = int(per_dim_count)
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    if dim is None:
        dim = eps.size
    if eps.size == 1 and dim > 1:
        eps = np.repeat(eps, dim)
    if eps.size != dim:
        raise InvalidArgumentError(f"eps has {eps.size} entries for a {dim}-dimensional grid")
    if np.any(~np.isfinite(eps)) or np.any(eps <= 0):
        raise InvalidArgumentError("eps must be positive")
    if mask not in MASKS:
        raise InvalidArgumentError(f"mask must be one of {MASKS}, got {mask!r}")

    offsets = np.arange(1, per_dim_count + 1) - (per_dim_count + 1) / 2.0
    # first coordinate positive picks one representative per +/- pair
    axes = [offsets[offsets > 0]] + [offsets] * (dim - 1)
    index = np.array(list(itertools.product(*axes)), dtype=float).reshape(-1, dim)
    half = index * eps
    half = half[_order(half)]

    total = half.shape[0]
    if mask == "spherical" and target_pairs is not None:
        if target_pairs < 0 or target_pairs > total:
            raise InvalidArgumentError(f"target_pairs={target_pairs} but only {total} pairs available")
        half = half[: int(target_pairs)]
    return FrequencyGrid(eps, half, per_dim_count, mask)


def grid_for_bandwidth(bandwidth: float, eps, mask: str = "full") -> FrequencyGrid:
    """Smallest grid whose boxes cover ``|xi_d| <= bandwidth`` in every dimension.

    With the spherical mask only pairs whose centre lies within ``bandwidth`` are kept.
    """
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    per_dim = int(2 * max(1, math.ceil(bandwidth / eps.min())))
    grid = build_grid(per_dim, eps, mask="full")
    if mask == "spherical":
        keep = np.sqrt(np.sum(grid.half_frequencies**2, axis=1)) <= bandwidth
        return build_grid(per_dim, eps, mask="spherical", target_pairs=int(keep.sum()))
    return grid


def feature_matrix(grid: FrequencyGrid, X) -> np.ndarray:
    """Real features ``[cos(2 pi z.x); sin(2 pi z.x)]`` with shape ``(2P, N)``.

    Rows ``0..P-1`` are the cosine block and rows ``P..2P-1`` the sine block, both in
    the order of ``grid.half_frequencies``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if grid.dim == 1 else X[None, :]
    if X.shape[1] != grid.dim:
        raise InvalidArgumentError(f"inputs have {X.shape[1]} columns, grid has {grid.dim}")
    if not np.all(np.isfinite(X)):
        rows = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
        raise InvalidArgumentError(f"non-finite inputs at rows {rows[:10].tolist()}")
    phase = (2.0 * math.pi) * (grid.half_frequencies @ X.T)
    return np.vstack([np.cos(phase), np.sin(phase)])


def feature_precision(grid: FrequencyGrid, density: SpectralDensity) -> np.ndarray:
    """Inverse prior variances ``2 eps^D s(z_m)`` for the cos and sin rows.

    Zero where the density underflows; such features carry no prior variance.
    """
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    prec = 2.0 * grid.cell_volume * s
    return np.concatenate([prec, prec])


def kuu_diag(grid: FrequencyGrid, density: SpectralDensity) -> np.ndarray:
    """Prior variances ``1 / (2 eps^D s(z_m))`` of the cos and sin features."""
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    # values at a numeric density's clamp floor carry no information either
    floor = float(getattr(density, "floor", 0.0))
    bad = np.flatnonzero(~(s > floor) | ~np.isfinite(s))
    if bad.size:
        z = grid.half_frequencies[bad[0]].tolist()
        raise DegenerateSpectrumError(f"spectral density is {s[bad[0]]:.3g} at frequency {z}")
    d = 1.0 / (2.0 * grid.cell_volume * s)
    return np.concatenate([d, d])
