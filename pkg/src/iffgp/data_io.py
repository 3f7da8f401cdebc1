"""Synthetic GP data, CSV ingestion, normalisation, splitting and test metrics."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, SchemaError, FormatError
from .gp_core import DENSE_LIMIT, PredictiveMarginals, cholesky
from .kernels import MATERN_NU, Kernel

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Normalization:
    """Affine maps ``x_norm = (x - x_shift) / x_scale`` and ``y_norm = (y - y_shift) / y_scale``."""

    x_shift: np.ndarray
    x_scale: np.ndarray
    y_shift: float = 0.0
    y_scale: float = 1.0

    @classmethod
    def identity(cls, dim: int) -> "Normalization":
        return cls(np.zeros(dim), np.ones(dim), 0.0, 1.0)

    @classmethod
    def fit(cls, X, y) -> "Normalization":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        xs = X.std(axis=0)
        ys = float(y.std())
        if np.any(xs <= 0):
            raise DegenerateInputError(f"input columns {np.flatnonzero(xs <= 0).tolist()} have zero variance")
        if ys <= 0:
            raise DegenerateInputError("targets have zero variance")
        return cls(X.mean(axis=0), xs, float(y.mean()), ys)

    def apply_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_shift) / self.x_scale

    def apply_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_shift) / self.y_scale

    def invert_x(self, X):
        return np.asarray(X, dtype=float) * self.x_scale + self.x_shift

    def invert_y(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_shift

    def to_dict(self) -> dict:
        return {
            "x_shift": np.asarray(self.x_shift).tolist(),
            "x_scale": np.asarray(self.x_scale).tolist(),
            "y_shift": self.y_shift,
            "y_scale": self.y_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["x_shift"], float), np.asarray(d["x_scale"], float), float(d["y_shift"]), float(d["y_scale"]))


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    normalization: Optional[Normalization] = None
    split_seed: Optional[int] = None
    columns: tuple = field(default=())

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.size:
            raise InvalidArgumentError(f"X has {X.shape[0]} rows but y has {y.size}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _frequencies_from_density(kernel: Kernel, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw frequencies from the normalised spectral density of ``kernel``."""
    ls = np.asarray(kernel.lengthscales)
    if kernel.family in ("se", "product"):
        cols = []
        for d, fam in enumerate(kernel.factor_families()):
            if fam == "se":
                t = rng.standard_normal(size)
            else:
                t = rng.standard_t(2.0 * MATERN_NU[fam], size)
            cols.append(t / (2.0 * math.pi * ls[d]))
        return np.stack(cols, axis=1)
    nu = MATERN_NU[kernel.family]
    g = rng.standard_normal((size, kernel.dim))
    w = rng.chisquare(2.0 * nu, size)[:, None]
    t = g * np.sqrt(2.0 * nu / w)
    return t / (2.0 * math.pi * ls)


def sample_gp_prior(X, kernel: Kernel, noise: float, seed: int, dense_limit: int = DENSE_LIMIT, num_fourier: int = 4096) -> np.ndarray:
    """Draw ``y = f(X) + noise`` with ``f ~ GP(0, kernel)``.

    Up to ``dense_limit`` points the draw is exact (Cholesky). Beyond that it falls
    back to ``num_fourier`` random Fourier features, which is approximate but keeps
    memory linear in N.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if noise < 0:
        raise InvalidArgumentError("noise variance must be nonnegative")
    rng = np.random.default_rng(seed)
    n = X.shape[0]
    if n <= dense_limit:
        K = kernel.gram(X)
        L = cholesky(K)
        f = L @ rng.standard_normal(n)
    else:
        xi = _frequencies_from_density(kernel, num_fourier, rng)
        a = rng.standard_normal(num_fourier)
        b = rng.standard_normal(num_fourier)
        f = np.empty(n)
        step = max(1, 4_000_000 // num_fourier)
        for start in range(0, n, step):
            phase = 2.0 * math.pi * (X[start:start + step] @ xi.T)
            f[start:start + step] = np.cos(phase) @ a + np.sin(phase) @ b
        f *= math.sqrt(kernel.variance / num_fourier)
    return f + math.sqrt(noise) * rng.standard_normal(n)


def synthetic_dataset(n: int, kernel: Kernel, noise: float, seed: int, width=None, dense_limit: int = DENSE_LIMIT) -> Dataset:
    """Inputs uniform on a centred box of side ``width`` (default ``6 sqrt(n / 2)``)."""
    rng = np.random.default_rng(seed)
    if width is None:
        width = 6.0 * math.sqrt(n / 2.0)
    width = np.broadcast_to(np.asarray(width, dtype=float), (kernel.dim,))
    X = (rng.random((n, kernel.dim)) - 0.5) * width
    y = sample_gp_prior(X, kernel, noise, seed + 1, dense_limit=dense_limit)
    return Dataset(X, y)


def load_csv(path, x_columns: Sequence[str], y_column: str) -> Dataset:
    """Read a comma-separated file with a header row."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in list(x_columns) + [y_column] if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        xi = [header.index(c) for c in x_columns]
        yi = header.index(y_column)
        rows = []
        for lineno, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[i]) for i in xi] + [float(row[yi])])
            except (ValueError, IndexError):
                raise SchemaError(f"{path}: malformed data row {lineno}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(data), axis=1))
    if bad.size:
        raise InvalidArgumentError(f"{path}: non-finite values in data rows {bad.tolist()}")
    return Dataset(data[:, :-1], data[:, -1], columns=tuple(x_columns) + (y_column,))


def normalize_split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0):
    """Random train/test split; normalisation statistics come from the train part only.

    Returns ``(train, test, normalization)``; both datasets are on the normalised scale.
    """
    if dataset.n < 5:
        raise InvalidArgumentError("need at least 5 points to split")
    if not 0 < train_fraction <= 1:
        raise InvalidArgumentError("train_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n)
    n_train = int(round(train_fraction * dataset.n))
    n_train = min(max(n_train, 2), dataset.n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if te.size == 0:
        warnings.warn("train_fraction leaves an empty test set", UserWarning, stacklevel=2)
    norm = Normalization.fit(dataset.X[tr], dataset.y[tr])
    train = Dataset(norm.apply_x(dataset.X[tr]), norm.apply_y(dataset.y[tr]), norm, seed, dataset.columns)
    test = Dataset(norm.apply_x(dataset.X[te]), norm.apply_y(dataset.y[te]), norm, seed, dataset.columns)
    return train, test, norm


def metrics(pred: PredictiveMarginals, y_test, normalization: Optional[Normalization] = None, noise: float = 0.0) -> dict:
    """RMSE and NLPD on the unnormalised scale.

    ``pred`` and ``noise`` are on the normalised scale; ``y_test`` is unnormalised.
    """
    mean = np.asarray(pred.mean, dtype=float).reshape(-1)
    var = np.asarray(pred.variance, dtype=float).reshape(-1) + noise
    y_test = np.asarray(y_test, dtype=float).reshape(-1)
    if mean.size != y_test.size or var.size != y_test.size:
        raise InvalidArgumentError("prediction and target sizes differ")
    if np.any(~(var > 0)):
        raise InvalidArgumentError(f"nonpositive predictive variance at {np.flatnonzero(~(var > 0))[:10].tolist()}")
    if normalization is not None:
        mean = normalization.invert_y(mean)
        var = var * normalization.y_scale**2
    if y_test.size == 0:
        return {"rmse": float("nan"), "nlpd": float("nan")}
    r = y_test - mean
    rmse = float(np.sqrt(np.mean(r**2)))
    nlpd = float(np.mean(0.5 * (LOG_2PI + np.log(var) + r**2 / var)))
    return {"rmse": rmse, "nlpd": nlpd}
