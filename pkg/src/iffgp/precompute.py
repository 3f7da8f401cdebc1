"""One-off data summaries for the collapsed objective, plus a binary cache format.

Cache layout (little-endian)::

    magic     8 bytes   b"IFFSUMRY"
    version   1 byte
    m         uint64    number of features
    n         uint64    number of data points
    nu2       float64
    ybar      m float64
    phi       m*m float64, row-major
    digest    32 bytes  sha256 provenance of (X, y, grid)
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CacheFormatError, InvalidArgumentError, StaleCacheError
from .features import FrequencyGrid, feature_matrix

MAGIC = b"IFFSUMRY"
VERSION = 1
DEFAULT_CHUNK = 10_000
_HEADER = struct.Struct("<8sBQQ")
_DIGEST_BYTES = 32


@dataclass(frozen=True, eq=False)
class DataSummary:
    nu2: float
    ybar: np.ndarray
    phi: np.ndarray
    n: int
    provenance_hash: bytes = b""

    @property
    def num_features(self) -> int:
        return self.ybar.size

    def __eq__(self, other):
        if not isinstance(other, DataSummary):
            return NotImplemented
        return (
            self.n == other.n
            and self.nu2 == other.nu2
            and np.array_equal(self.ybar, other.ybar)
            and np.array_equal(self.phi, other.phi)
            and self.provenance_hash == other.provenance_hash
        )

    __hash__ = None


def provenance_hash(X, y, grid: FrequencyGrid) -> bytes:
    X = np.ascontiguousarray(X, dtype="<f8")
    y = np.ascontiguousarray(y, dtype="<f8")
    h = hashlib.sha256()
    h.update(struct.pack("<QQ", *(X.shape if X.ndim == 2 else (X.shape[0], 1))))
    h.update(X.tobytes())
    h.update(y.tobytes())
    h.update(grid.digest())
    return h.digest()


def summaries_from_features(kuf, y, provenance: bytes = b"") -> DataSummary:
    kuf = np.asarray(kuf, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    phi = kuf @ kuf.T
    return DataSummary(float(y @ y), kuf @ y, 0.5 * (phi + phi.T), y.size, provenance)


def _check_inputs(X, y, grid):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.size:
        raise InvalidArgumentError(f"X has {X.shape[0]} rows but y has {y.size}")
    if y.size < 1:
        raise InvalidArgumentError("need at least one data point")
    if X.shape[1] != grid.dim:
        raise InvalidArgumentError(f"X has {X.shape[1]} columns, grid has {grid.dim}")
    finite = np.all(np.isfinite(X), axis=1) & np.isfinite(y)
    if not finite.all():
        rows = np.flatnonzero(~finite)
        raise InvalidArgumentError(f"non-finite data at rows {rows[:10].tolist()}")
    return X, y


def compute_summaries(X, y, grid: FrequencyGrid, chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> DataSummary:
    """``nu2 = y.y``, ``ybar = Kuf y`` and ``phi = Kuf Kuf^T`` accumulated over chunks.

    Chunks may be evaluated on several threads but are always reduced in ascending
    order, so the result does not depend on ``threads``.
    """
    if int(chunk_size) < 1:
        raise InvalidArgumentError("chunk_size must be >= 1")
    chunk_size = int(chunk_size)
    X, y = _check_inputs(X, y, grid)
    m = grid.num_features
    starts = range(0, y.size, chunk_size)

    def partial(start):
        F = feature_matrix(grid, X[start:start + chunk_size])
        yc = y[start:start + chunk_size]
        return F @ yc, F @ F.T

    ybar = np.zeros(m)
    phi = np.zeros((m, m))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(partial, starts)
            for yb, ph in parts:
                ybar += yb
                phi += ph
    else:
        for start in starts:
            yb, ph = partial(start)
            ybar += yb
            phi += ph
    phi = 0.5 * (phi + phi.T)
    return DataSummary(float(y @ y), ybar, phi, int(y.size), provenance_hash(X, y, grid))


def save_summary(summary: DataSummary, path) -> None:
    digest = summary.provenance_hash or b"\0" * _DIGEST_BYTES
    if len(digest) != _DIGEST_BYTES:
        raise InvalidArgumentError("provenance hash must be a 32-byte sha256 digest")
    m = summary.ybar.size
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, m, summary.n))
        fh.write(struct.pack("<d", summary.nu2))
        fh.write(np.ascontiguousarray(summary.ybar, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(summary.phi, dtype="<f8").tobytes())
        fh.write(digest)


def load_summary(path, expected_hash=None) -> DataSummary:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise CacheFormatError(f"{path}: file too short for a summary header")
    magic, version, m, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CacheFormatError(f"{path}: unsupported version {version}")
    expected_len = _HEADER.size + 8 * (1 + m + m * m) + _DIGEST_BYTES
    if len(data) != expected_len:
        raise CacheFormatError(f"{path}: expected {expected_len} bytes, found {len(data)}")
    off = _HEADER.size
    (nu2,) = struct.unpack_from("<d", data, off)
    off += 8
    ybar = np.frombuffer(data, dtype="<f8", count=m, offset=off).astype(float)
    off += 8 * m
    phi = np.frombuffer(data, dtype="<f8", count=m * m, offset=off).astype(float).reshape(m, m)
    off += 8 * m * m
    digest = data[off:off + _DIGEST_BYTES]
    if expected_hash is not None and digest != expected_hash:
        raise StaleCacheError(f"{path}: cached summary was computed for different data or grid")
    return DataSummary(nu2, ybar, phi, int(n), digest)


def cached_summaries(X, y, grid: FrequencyGrid, cache_dir=None, chunk_size: int = DEFAULT_CHUNK, threads: int = 1):
    """Load summaries from ``cache_dir`` when present, computing and storing them otherwise.

    Returns ``(summary, path, hit)``.
    """
    if cache_dir is None:
        return compute_summaries(X, y, grid, chunk_size, threads), None, False
    X, y = _check_inputs(X, y, grid)
    digest = provenance_hash(X, y, grid)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{digest.hex()[:32]}.iffsum"
    if path.exists():
        return load_summary(path, digest), path, True
    summary = compute_summaries(X, y, grid, chunk_size, threads)
    save_summary(summary, path)
    return summary, path, False
