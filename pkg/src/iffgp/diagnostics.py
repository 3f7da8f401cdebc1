"""Desk-scale experiments on approximation quality and cost, emitted as plain tables.

Every function returns a :class:`Table`; :func:`write_tables` stores them as CSV files
next to a ``manifest.json`` describing the columns and axes. Wall-clock columns are the
only nondeterministic entries.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad

from . import gp_core
from .data_io import Dataset, synthetic_dataset
from .errors import IFFError, InvalidArgumentError
from .features import FrequencyGrid, build_grid, default_epsilon, feature_matrix, grid_for_bandwidth
from .kernels import TAIL_EXPONENT, Kernel, SpectralDensity, density_for
from .precompute import DataSummary, compute_summaries
from .train import HyperParams, ModelConfig, OptConfig, fit, maximize

log = logging.getLogger(__name__)

SNR = 0.774
BOUND_SLACK = 1e-3
REFERENCE_RATIO = 0.95
# schedule exponent for kernels whose spectral tail beats every power law
LIGHT_TAIL_Q = 9.0
# t-hat values at this relative size are indistinguishable from cancellation error
_ROUNDING_FLOOR = 1e3 * np.finfo(float).eps


@dataclass
class Table:
    name: str
    columns: tuple
    rows: list
    axes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_tables(tables: Sequence[Table], outdir) -> Path:
    """Write ``<outdir>/<name>.csv`` per table and merge entries into ``manifest.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest_path = outdir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    for t in tables:
        t.to_csv(outdir / f"{t.name}.csv")
        manifest[t.name] = {"file": f"{t.name}.csv", "columns": list(t.columns), "axes": t.axes, "meta": t.meta}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return manifest_path


def snr_noise(kernel: Kernel, snr: float = SNR) -> float:
    """Noise variance giving ``k(x, x) / noise = snr``."""
    return kernel.variance / snr


def _as_xy(dataset):
    if isinstance(dataset, Dataset):
        return dataset.X, dataset.y
    X, y = dataset
    X = np.asarray(X, dtype=float)
    return (X[:, None] if X.ndim == 1 else X), np.asarray(y, dtype=float).reshape(-1)


def _run_rows(fn: Callable, items: Sequence, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def _grid_for_count(M: int, eps: np.ndarray) -> FrequencyGrid:
    """Grid with ``M`` real features; spherical beyond one dimension."""
    if M % 2:
        raise InvalidArgumentError(f"feature counts must be even, got {M}")
    dim = eps.size
    if dim == 1:
        return build_grid(M, eps)
    n = 2
    while n**dim < M:
        n += 2
    return build_grid(n, eps, dim, "spherical", M // 2)


def _resolve_eps(eps_rule, X: np.ndarray, M: int) -> np.ndarray:
    if isinstance(eps_rule, str):
        if eps_rule != "default":
            raise InvalidArgumentError(f"unknown eps rule {eps_rule!r}")
        return default_epsilon(X)
    if callable(eps_rule):
        return np.atleast_1d(np.asarray(eps_rule(X, M), dtype=float))
    return np.broadcast_to(np.atleast_1d(np.asarray(eps_rule, dtype=float)), (X.shape[1],)).copy()


def empty_feature_objective(y, kernel: Kernel, noise: float) -> float:
    """Collapsed objective with no features: ``log N(y|0, noise I) - N k(0) / (2 noise)``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    empty = DataSummary(float(y @ y), np.zeros(0), np.zeros((0, 0)), y.size)
    return gp_core.collapsed_objective(empty, np.zeros(0), noise, y.size * kernel.variance).total


def gap_curve(
    dataset,
    kernel_truth: Kernel,
    noise_truth: float,
    M_list: Sequence[int],
    eps_rule="default",
    opt: Optional[OptConfig] = None,
    threads: int = 1,
) -> Table:
    """Gap between the exact marginal likelihood and the IFF objective as ``M`` grows.

    For each feature count the IFF objective is optimised; ``gap`` is
    ``(L(theta) - F(theta)) / N`` at the learned ``theta`` and ``truth_gap`` is
    ``(L(theta_true) - F(theta)) / N``. Rows that fail record the error and leave
    NaNs; the other rows still run.
    """
    X, y = _as_xy(dataset)
    n = y.size
    gp_core._check_dense(n, gp_core.DENSE_LIMIT)
    opt = opt or OptConfig()
    family, factors = kernel_truth.family, kernel_truth.factors
    L_truth = gp_core.exact_log_marginal(X, y, kernel_truth, noise_truth)

    def row(M):
        t0 = time.perf_counter()
        try:
            M = int(M)
            eps = _resolve_eps(eps_rule, X, M)
            if M == 0:
                init = HyperParams.initial(X.shape[1], opt.init_lengthscale, opt.init_signal_variance, opt.init_noise_variance)

                def objective(v):
                    p = HyperParams.from_vector(v)
                    return empty_feature_objective(y, p.kernel(family, factors), p.noise_variance)

                run = maximize(objective, init.to_vector(), opt.max_iters, opt.tol)
                params, F, converged = HyperParams.from_vector(run.x), run.value, run.converged
            else:
                config = ModelConfig(method="iff", kernel_family=family, kernel_factors=factors, grid=_grid_for_count(M, eps))
                report = fit(X, y, config, opt)
                params, F, converged = report.final_params, report.final_objective, report.converged
            L = gp_core.exact_log_marginal(X, y, params.kernel(family, factors), params.noise_variance)
            lengthscale = float(params.lengthscales[0])
            bound_ok = bool(F <= L + BOUND_SLACK * n)
            if not bound_ok:
                warnings.warn(f"M={M}: objective exceeds the marginal likelihood by {(F - L) / n:.3g} per point", RuntimeWarning, stacklevel=2)
            return (M, float(eps[0]), (L - F) / n, (L_truth - F) / n, lengthscale, params.noise_variance, bool(converged), bound_ok, time.perf_counter() - t0, "")
        except (IFFError, np.linalg.LinAlgError) as exc:
            log.warning("gap_curve row M=%s failed: %s", M, exc)
            nan = float("nan")
            return (M, nan, nan, nan, nan, nan, False, False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")

    rows = _run_rows(row, list(M_list), threads)
    return Table(
        "gap_curve",
        ("M", "eps", "gap", "truth_gap", "lengthscale", "noise_variance", "converged", "bound_ok", "seconds", "error"),
        rows,
        axes={"x": "M", "y": ["gap", "truth_gap"]},
        meta={"n": n, "log_marginal_truth": L_truth, "eps_rule": eps_rule if isinstance(eps_rule, str) else "custom"},
    )


def monotone_violation(values) -> float:
    """Largest increase between consecutive finite entries (0 when nonincreasing)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(max(0.0, np.max(np.diff(v)))) if v.size > 1 else 0.0


def epsilon_sweep(
    dataset,
    kernel: Kernel,
    noise: float,
    bandwidths: Sequence[float],
    ratios: Sequence[float] = (0.25, 0.5, 0.75, REFERENCE_RATIO, 2.0),
    threads: int = 1,
) -> Table:
    """Gap at fixed hyperparameters over covered bandwidth ``M eps`` and ``eps W_x``.

    ``W_x`` is the per-dimension data range; ``ratio = eps * W_x``. Grids cover
    ``|xi_d| <= bandwidth`` in ordinary frequency units.
    """
    X, y = _as_xy(dataset)
    n = y.size
    gp_core._check_dense(n, gp_core.DENSE_LIMIT)
    width = np.ptp(X, axis=0)
    if np.any(width <= 0):
        raise InvalidArgumentError("inputs have zero range")
    L = gp_core.exact_log_marginal(X, y, kernel, noise)
    density = density_for(kernel)
    mask = "full" if X.shape[1] == 1 else "spherical"

    def row(item):
        B, r = item
        t0 = time.perf_counter()
        try:
            eps = r / width
            grid = grid_for_bandwidth(B, eps, mask)
            F = gp_core.iff_objective(compute_summaries(X, y, grid), grid, kernel, noise, density).total
            bound_ok = bool(F <= L + BOUND_SLACK * n)
            return (B, r, float(eps[0]), grid.num_features, (L - F) / n, bool(r == REFERENCE_RATIO), bound_ok, time.perf_counter() - t0, "")
        except (IFFError, np.linalg.LinAlgError) as exc:
            nan = float("nan")
            return (B, r, nan, 0, nan, bool(r == REFERENCE_RATIO), False, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")

    items = [(float(B), float(r)) for B in bandwidths for r in ratios]
    rows = _run_rows(row, items, threads)
    return Table(
        "eps_sweep",
        ("bandwidth", "eps_times_width", "eps", "num_features", "gap", "reference", "bound_ok", "seconds", "error"),
        rows,
        axes={"x": "eps_times_width", "series": "bandwidth", "y": "gap", "reference_line": REFERENCE_RATIO},
        meta={"n": n, "log_marginal": L, "width": width.tolist()},
    )


def sweep_spread(table: Table, bandwidth: float, max_ratio: float = REFERENCE_RATIO) -> float:
    """``(max - min) / min`` of the gap over ratios up to ``max_ratio`` at one bandwidth."""
    B = table.column("bandwidth")
    r = table.column("eps_times_width")
    g = table.column("gap").astype(float)
    sel = (B == bandwidth) & (r <= max_ratio) & np.isfinite(g)
    if sel.sum() < 2:
        raise InvalidArgumentError(f"fewer than two usable entries at bandwidth {bandwidth}")
    return float((g[sel].max() - g[sel].min()) / g[sel].min())


@dataclass
class RateResult:
    slope: float
    predicted: float
    eps_power: float
    table: Table


def rate_check(kernel: Kernel, M_list: Sequence[int], eps0: float = 1.0, q: Optional[float] = None, noise: float = 1.0) -> RateResult:
    """Log-log slope of ``t_hat / (N noise)`` against ``M`` with ``eps = eps0 M^-p``.

    ``p = (q + 1) / (q + 3)``; ``q`` defaults to the kernel's known tail exponent. The
    squared exponential has no finite exponent (its tail is lighter than any power), so
    a schedule with ``q = 9`` is used; ``p = 1`` would keep ``M eps`` fixed and never
    widen the covered band. The predicted slope is ``-2q / (q + 3)``.
    Values that are nonpositive or at rounding level are left out of the fit.
    """
    if q is None:
        q = TAIL_EXPONENT.get(kernel.family, LIGHT_TAIL_Q)
    if not (q > 0 and math.isfinite(q)):
        raise InvalidArgumentError(f"tail exponent must be positive and finite, got {q}")
    p = (q + 1.0) / (q + 3.0)
    predicted = -2.0 * q / (q + 3.0)
    density = density_for(kernel)
    rows = []
    for M in M_list:
        M = int(M)
        eps = eps0 * M ** (-p)
        grid = _grid_for_count(M, np.full(kernel.dim, eps))
        s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
        t = gp_core.iff_trace(1, kernel.variance, grid, s) / noise
        rows.append((M, eps, t, bool(t > _ROUNDING_FLOOR * kernel.variance / noise)))
    table = Table("rate_check", ("M", "eps", "trace_per_point", "used"), rows, axes={"x": "M", "y": "trace_per_point", "scale": "loglog"})
    used = [r for r in rows if r[3]]
    dropped = [r[0] for r in rows if not r[3]]
    if dropped:
        warnings.warn(f"trace values at M={dropped} are nonpositive or at rounding level; excluded from the fit", RuntimeWarning, stacklevel=2)
    if len(used) < 2:
        raise InvalidArgumentError("fewer than two usable trace values for a slope")
    slope = float(np.polyfit(np.log([r[0] for r in used]), np.log([r[2] for r in used]), 1)[0])
    table.meta.update({"slope": slope, "predicted": predicted, "q": q, "p": p, "eps0": eps0})
    return RateResult(slope, predicted, p, table)


def timing_harness(
    N_list: Sequence[int],
    M: int,
    method: str = "iff",
    reps: int = 5,
    max_iters: int = 3,
    seed: int = 0,
    kernel: Optional[Kernel] = None,
) -> Table:
    """Median precompute and per-step seconds over ``reps`` short fits for each ``N``.

    Data are synthetic (1D unless ``kernel`` says otherwise) with inputs on
    ``6 sqrt(N / 2)`` and noise set by the default signal-to-noise ratio.
    """
    kernel = kernel or Kernel("se", (1.0,))
    noise = snr_noise(kernel)
    rows = []
    for i, N in enumerate(N_list):
        data = synthetic_dataset(int(N), kernel, noise, seed + 2 * i)
        if method == "iff":
            config = ModelConfig(method="iff", kernel_family=kernel.family, kernel_factors=kernel.factors, per_dim_count=M)
        elif method == "sgpr_kmeans":
            config = ModelConfig(method="sgpr_kmeans", kernel_family=kernel.family, kernel_factors=kernel.factors, num_inducing=M)
        else:
            config = ModelConfig(method=method, kernel_family=kernel.family, kernel_factors=kernel.factors)
        pre, step = [], []
        for _ in range(reps):
            report = fit(data.X, data.y, config, OptConfig(max_iters=max_iters, seed=seed))
            pre.append(report.precompute_seconds)
            step.append(report.mean_step_seconds)
        rows.append((int(N), M, float(np.median(pre)), float(np.median(step))))
    return Table(
        f"timing_{method}",
        ("N", "M", "precompute_seconds", "mean_step_seconds"),
        rows,
        axes={"x": "N", "y": ["precompute_seconds", "mean_step_seconds"]},
        meta={"method": method, "reps": reps, "max_iters": max_iters},
    )


def time_to_gap(
    dataset,
    log_marginal_truth: float,
    method: str,
    sizes: Sequence[int],
    threshold: float,
    kernel_family: str = "se",
    opt: Optional[OptConfig] = None,
) -> Table:
    """Fit with increasing ``sizes`` until ``(L_truth - objective) / N <= threshold``.

    ``sizes`` are feature counts for IFF and inducing-point counts otherwise. The
    table's ``meta["matched"]`` holds the first row meeting the threshold, if any.
    """
    X, y = _as_xy(dataset)
    n = y.size
    opt = opt or OptConfig()
    rows = []
    matched = None
    for size in sizes:
        if method == "iff":
            config = ModelConfig(method="iff", kernel_family=kernel_family, grid=_grid_for_count(int(size), default_epsilon(X)))
        else:
            config = ModelConfig(method=method, kernel_family=kernel_family, num_inducing=int(size))
        t0 = time.perf_counter()
        report = fit(X, y, config, opt)
        seconds = time.perf_counter() - t0
        gap = (log_marginal_truth - report.final_objective) / n
        row = (int(size), gap, float(report.final_params.lengthscales[0]), report.final_params.noise_variance, seconds)
        rows.append(row)
        if gap <= threshold:
            matched = row
            break
    return Table(
        f"time_to_gap_{method}",
        ("size", "truth_gap", "lengthscale", "noise_variance", "seconds"),
        rows,
        axes={"x": "size", "y": "truth_gap"},
        meta={"method": method, "threshold": threshold, "matched": matched},
    )


def integrated_features(grid: FrequencyGrid, density: SpectralDensity, X) -> np.ndarray:
    """Real features with the density integrated over each box instead of frozen at its centre.

    Row ``m`` of the cosine block is
    ``eps^-1 int_box cos(2 pi xi x) sqrt(s(xi) / s(z_m)) dxi``, and likewise for sine,
    so that replacing the integrand's density ratio by one recovers
    :func:`feature_matrix`. One-dimensional grids only.
    """
    if grid.dim != 1:
        raise InvalidArgumentError("integrated features are implemented for 1D grids")
    X = np.asarray(X, dtype=float).reshape(-1)
    e = float(grid.eps[0])
    z = grid.half_frequencies[:, 0]
    C = np.empty((z.size, X.size))
    S = np.empty_like(C)

    def dens(t):
        return float(density(np.array([[t]]))[0])

    for i, zm in enumerate(z):
        sz = dens(zm)
        for j, x in enumerate(X):
            w = 2.0 * math.pi * x

            def fc(t):
                return math.cos(w * t) * math.sqrt(dens(t) / sz)

            def fs(t):
                return math.sin(w * t) * math.sqrt(dens(t) / sz)

            C[i, j] = quad(fc, zm - e / 2, zm + e / 2, epsabs=0.0, epsrel=1e-12, limit=200)[0] / e
            S[i, j] = quad(fs, zm - e / 2, zm + e / 2, epsabs=0.0, epsrel=1e-12, limit=200)[0] / e
    return np.vstack([C, S])


def prediction_feature_error(X, y, kernel: Kernel, noise: float, grid: FrequencyGrid, Xstar) -> tuple:
    """Max abs differences ``(|mu - mu_hat|, |Sigma - Sigma_hat|)`` at ``Xstar``.

    Both predictions share the optimal q(u) of the IFF objective; they differ only in
    using integrated versus centre-frequency test features.
    """
    density = density_for(kernel)
    summary = compute_summaries(X, y, grid)
    s = np.asarray(density(grid.half_frequencies), dtype=float).reshape(-1)
    kuu = np.concatenate([1.0 / (2.0 * grid.cell_volume * s)] * 2)
    state = gp_core.optimal_qu_from_summary(summary, kuu, noise)
    kss = kernel.diag(Xstar)
    approx = gp_core.predict_from_features(state, kuu, feature_matrix(grid, Xstar), kss)
    exact = gp_core.predict_from_features(state, kuu, integrated_features(grid, density, Xstar), kss)
    return float(np.max(np.abs(exact.mean - approx.mean))), float(np.max(np.abs(exact.variance - approx.variance)))


def box_feature(density: SpectralDensity, x: float, z: float, eps: float) -> tuple:
    """``(c, c_hat)`` for one 1D box: ``c = eps^-1 int e^{-i 2 pi xi x} sqrt(s(xi)) dxi``."""

    def dens(t):
        return float(density(np.array([[t]]))[0])

    w = 2.0 * math.pi * x
    re = quad(lambda t: math.cos(w * t) * math.sqrt(dens(t)), z - eps / 2, z + eps / 2, epsabs=0.0, epsrel=1e-13, limit=200)[0]
    im = -quad(lambda t: math.sin(w * t) * math.sqrt(dens(t)), z - eps / 2, z + eps / 2, epsabs=0.0, epsrel=1e-13, limit=200)[0]
    c = complex(re, im) / eps
    c_hat = math.sqrt(dens(z)) * complex(math.cos(w * z), -math.sin(w * z))
    return c, c_hat
