"""Hyperparameter learning for IFF and the inducing-point / exact baselines.

Gradients are central finite differences on the log-parameters; with the IFF
summaries precomputed each objective evaluation costs O(M^3), so the D + 2 extra
evaluation pairs per step stay cheap.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.cluster.vq import kmeans2

from . import gp_core
from .errors import InvalidArgumentError, NumericalFailure
from .features import build_grid, default_epsilon, grid_for_bandwidth, FrequencyGrid
from .kernels import Kernel, density_for
from .precompute import DEFAULT_CHUNK, cached_summaries, compute_summaries

log = logging.getLogger(__name__)

METHODS = ("iff", "sgpr_kmeans", "exact")
INIT_LENGTHSCALE = 0.2
FD_STEP = 1e-4
GRAD_TOL = 1e-6
MAX_REJECTIONS = 10


@dataclass(frozen=True)
class HyperParams:
    log_lengthscales: tuple
    log_signal_variance: float
    log_noise_variance: float

    def __post_init__(self):
        object.__setattr__(self, "log_lengthscales", tuple(float(v) for v in np.atleast_1d(self.log_lengthscales)))
        vals = self.to_vector()
        if not np.all(np.isfinite(vals)):
            raise InvalidArgumentError(f"hyperparameters must be finite, got {vals}")

    @classmethod
    def initial(cls, dim: int, lengthscale: float = INIT_LENGTHSCALE, signal_variance: float = 1.0, noise_variance: float = 1.0):
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (dim,))
        if np.any(ls <= 0) or signal_variance <= 0 or noise_variance <= 0:
            raise InvalidArgumentError("initial hyperparameters must be positive")
        return cls(tuple(np.log(ls)), math.log(signal_variance), math.log(noise_variance))

    @classmethod
    def from_vector(cls, v) -> "HyperParams":
        v = np.asarray(v, dtype=float)
        return cls(tuple(v[:-2]), float(v[-2]), float(v[-1]))

    def to_vector(self) -> np.ndarray:
        return np.array(list(self.log_lengthscales) + [self.log_signal_variance, self.log_noise_variance])

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_lengthscales))

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    def kernel(self, family: str, factors=None) -> Kernel:
        return Kernel(family, tuple(self.lengthscales), self.signal_variance, factors)

    def to_dict(self) -> dict:
        return {
            "lengthscales": self.lengthscales.tolist(),
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
        }


@dataclass
class ModelConfig:
    method: str = "iff"
    kernel_family: str = "se"
    kernel_factors: Optional[tuple] = None
    density: str = "closed"
    # IFF grid: either an explicit grid, or per_dim_count / bandwidth with eps ("auto" or values)
    grid: Optional[FrequencyGrid] = None
    per_dim_count: Optional[int] = None
    bandwidth: Optional[float] = None
    eps: object = "auto"
    mask: str = "full"
    target_pairs: Optional[int] = None
    # inducing points
    num_inducing: int = 50
    inducing: Optional[np.ndarray] = None
    dense_limit: int = gp_core.DENSE_LIMIT
    chunk_size: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class OptConfig:
    max_iters: int = 1000
    tol: float = 1e-8
    restarts: int = 0
    seed: int = 0
    init_lengthscale: float = INIT_LENGTHSCALE
    init_signal_variance: float = 1.0
    init_noise_variance: float = 1.0
    threads: int = 1
    cache_dir: Optional[str] = None


@dataclass
class FitReport:
    final_params: HyperParams
    objective_trace: list
    precompute_seconds: float
    per_step_seconds: list
    converged: bool
    restarts_used: int
    method: str = "iff"
    final_objective: float = float("nan")
    evaluations: int = 0
    message: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def mean_step_seconds(self) -> float:
        return float(np.mean(self.per_step_seconds)) if self.per_step_seconds else float("nan")

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "final_params": self.final_params.to_dict(),
            "final_log_params": self.final_params.to_vector().tolist(),
            "final_objective": self.final_objective,
            "objective_trace": [[int(s), float(v)] for s, v in self.objective_trace],
            "precompute_seconds": self.precompute_seconds,
            "per_step_seconds": list(self.per_step_seconds),
            "converged": self.converged,
            "restarts_used": self.restarts_used,
            "evaluations": self.evaluations,
            "message": self.message,
        }
        d.update(self.extras)
        return d


def resolve_grid(X, config: ModelConfig) -> FrequencyGrid:
    """Frequency grid for ``config``; ``eps="auto"`` uses the data range."""
    if config.grid is not None:
        return config.grid
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    eps = default_epsilon(X) if isinstance(config.eps, str) and config.eps == "auto" else np.broadcast_to(np.asarray(config.eps, float), (X.shape[1],))
    if config.bandwidth is not None:
        return grid_for_bandwidth(config.bandwidth, eps, config.mask)
    if config.per_dim_count is None:
        raise InvalidArgumentError("IFF needs a grid, per_dim_count or bandwidth")
    return build_grid(config.per_dim_count, eps, X.shape[1], config.mask, config.target_pairs)


def kmeans_inducing(X, m: int, seed: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if m >= X.shape[0]:
        return X.copy()
    centroids, _ = kmeans2(X, m, seed=np.random.default_rng(seed), minit="++")
    return centroids


def make_objective(X, y, config: ModelConfig, opt: Optional[OptConfig] = None):
    """Build ``f(log_params) -> objective`` for ``config``.

    Returns ``(f, precompute_seconds, extras)``; for IFF the data summaries are computed
    here, once, and the returned closure never touches the data again.
    """
    opt = opt or OptConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).reshape(-1)
    family, factors = config.kernel_family, config.kernel_factors
    extras: dict = {}

    if config.method == "iff":
        grid = resolve_grid(X, config)
        t0 = time.perf_counter()
        if opt.cache_dir is not None:
            summary, path, hit = cached_summaries(X, y, grid, opt.cache_dir, config.chunk_size, opt.threads)
            extras["cache_path"] = str(path)
            extras["cache_hit"] = hit
        else:
            summary = compute_summaries(X, y, grid, config.chunk_size, opt.threads)
        precompute = time.perf_counter() - t0
        extras["grid"] = grid
        extras["summary"] = summary

        def objective(v):
            p = HyperParams.from_vector(v)
            kernel = p.kernel(family, factors)
            return gp_core.iff_objective(summary, grid, kernel, p.noise_variance, density_for(kernel, config.density)).total

    elif config.method == "sgpr_kmeans":
        t0 = time.perf_counter()
        Z = config.inducing if config.inducing is not None else kmeans_inducing(X, config.num_inducing, opt.seed)
        precompute = time.perf_counter() - t0
        extras["inducing"] = Z

        def objective(v):
            p = HyperParams.from_vector(v)
            return gp_core.sgpr_inducing_objective(X, y, p.kernel(family, factors), p.noise_variance, Z).total

    else:
        if y.size > config.dense_limit:
            raise InvalidArgumentError(f"exact method limited to N <= {config.dense_limit}")
        precompute = 0.0

        def objective(v):
            p = HyperParams.from_vector(v)
            return gp_core.exact_log_marginal(X, y, p.kernel(family, factors), p.noise_variance, config.dense_limit)

    return objective, precompute, extras


def _safe_eval(fun, x) -> float:
    try:
        val = float(fun(x))
    except (NumericalFailure, FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        raise NumericalFailure(str(exc)) from exc
    if not np.isfinite(val):
        raise NumericalFailure(f"objective is {val} at {np.asarray(x).tolist()}")
    return val


def fd_gradient(fun: Callable, x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (_safe_eval(fun, x + e) - _safe_eval(fun, x - e)) / (2.0 * step)
    return g


def gradient_check(objective_fn: Callable, params, step: float = FD_STEP) -> float:
    """Largest relative disagreement between central differences at ``step`` and ``step/2``."""
    x = params.to_vector() if isinstance(params, HyperParams) else np.asarray(params, dtype=float)
    g1 = fd_gradient(objective_fn, x, step)
    g2 = fd_gradient(objective_fn, x, step / 2.0)
    scale = max(float(np.max(np.abs(g2))), 1e-12)
    return float(np.max(np.abs(g1 - g2)) / scale)


@dataclass
class RunResult:
    x: np.ndarray
    value: float
    trace: list
    step_seconds: list
    converged: bool
    evaluations: int
    message: str


def maximize(fun, x0, max_iters: int, tol: float, memory: int = 10) -> RunResult:
    """L-BFGS ascent with backtracking line search and a shrinking step cap.

    Failed evaluations or line searches count as rejections; after ``MAX_REJECTIONS``
    consecutive rejections the run stops unconverged.
    """
    x = np.asarray(x0, dtype=float).copy()
    evals = 0

    def f(z):
        nonlocal evals
        evals += 1
        return _safe_eval(fun, z)

    fx = f(x)
    trace = [(0, fx)]
    steps: list = []
    if max_iters <= 0:
        return RunResult(x, fx, trace, steps, False, evals, "no iterations requested")

    s_hist: list = []
    y_hist: list = []
    radius = 2.0
    rejections = 0
    g = None
    for it in range(1, max_iters + 1):
        t0 = time.perf_counter()
        if g is None:
            g = fd_gradient(f, x)
        if np.max(np.abs(g)) < GRAD_TOL:
            steps.append(time.perf_counter() - t0)
            return RunResult(x, fx, trace, steps, True, evals, "gradient below tolerance")

        # two-loop recursion on the negated objective
        q = -g.copy()
        alphas = []
        for s, yv in reversed(list(zip(s_hist, y_hist))):
            rho = 1.0 / (yv @ s)
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * yv
        if s_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, yv), a in zip(zip(s_hist, y_hist), reversed(alphas)):
            rho = 1.0 / (yv @ s)
            b = rho * (yv @ q)
            q += (a - b) * s
        direction = -q
        if direction @ g <= 0:
            direction = g / max(1.0, np.linalg.norm(g))
            s_hist.clear()
            y_hist.clear()
        longest = np.max(np.abs(direction))
        if longest > radius:
            direction *= radius / longest

        step = 1.0
        accepted = False
        slope = direction @ g
        for _ in range(30):
            x_new = x + step * direction
            try:
                f_new = f(x_new)
            except NumericalFailure:
                step *= 0.5
                continue
            if f_new >= fx + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5

        if not accepted:
            rejections += 1
            radius *= 0.5
            s_hist.clear()
            y_hist.clear()
            steps.append(time.perf_counter() - t0)
            if rejections >= MAX_REJECTIONS:
                return RunResult(x, fx, trace, steps, False, evals, "too many rejected steps")
            continue

        rejections = 0
        try:
            g_new = fd_gradient(f, x_new)
        except NumericalFailure:
            radius *= 0.5
            steps.append(time.perf_counter() - t0)
            continue
        s_vec = x_new - x
        y_vec = g - g_new  # gradient of the negated objective changes by -(g_new - g)
        if s_vec @ y_vec > 1e-12 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec):
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        change = abs(f_new - fx) / max(abs(fx), 1.0)
        x, fx, g = x_new, f_new, g_new
        trace.append((it, fx))
        radius = min(2.0 * radius, 2.0) if step == 1.0 else radius
        steps.append(time.perf_counter() - t0)
        if change < tol:
            return RunResult(x, fx, trace, steps, True, evals, "relative change below tolerance")
    return RunResult(x, fx, trace, steps, False, evals, "iteration limit reached")


def fit(X, y, model_config: Optional[ModelConfig] = None, opt_config: Optional[OptConfig] = None, init: Optional[HyperParams] = None) -> FitReport:
    """Maximise the method's objective over log-hyperparameters."""
    config = model_config or ModelConfig()
    opt = opt_config or OptConfig()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    objective, precompute, extras = make_objective(X, y, config, opt)

    if init is None:
        init = HyperParams.initial(X.shape[1], opt.init_lengthscale, opt.init_signal_variance, opt.init_noise_variance)
    x0 = init.to_vector()
    try:
        _safe_eval(objective, x0)
    except NumericalFailure as exc:
        raise NumericalFailure(f"objective fails at the initial point: {exc}") from exc

    rng = np.random.default_rng(opt.seed)
    best = None
    step_seconds: list = []
    for r in range(opt.restarts + 1):
        start = x0 if r == 0 else x0 + 0.5 * rng.standard_normal(x0.size)
        try:
            run = maximize(objective, start, opt.max_iters, opt.tol)
        except NumericalFailure as exc:
            if r == 0:
                raise
            log.warning("restart %d failed at its start point: %s", r, exc)
            continue
        step_seconds.extend(run.step_seconds)
        log.debug("run %d: objective %.6g after %d evaluations (%s)", r, run.value, run.evaluations, run.message)
        if best is None or run.value > best.value:
            best = run

    extras = dict(extras)
    public = {}
    if "grid" in extras:
        grid = extras["grid"]
        public["num_features"] = grid.num_features
        public["eps"] = grid.eps.tolist()
    if "inducing" in extras:
        public["num_inducing"] = int(np.asarray(extras["inducing"]).shape[0])
    if "cache_hit" in extras:
        public["cache_hit"] = extras["cache_hit"]
        public["cache_path"] = extras["cache_path"]
    report = FitReport(
        final_params=HyperParams.from_vector(best.x),
        objective_trace=best.trace,
        precompute_seconds=precompute,
        per_step_seconds=step_seconds,
        converged=best.converged,
        restarts_used=opt.restarts,
        method=config.method,
        final_objective=best.value,
        evaluations=best.evaluations,
        message=best.message,
        extras=public,
    )
    report.artifacts = extras  # grid / summary / inducing points, not serialised
    return report
