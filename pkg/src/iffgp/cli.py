"""Command-line entry point: ``iffgp <command> [options]``.

Commands ``fit``, ``predict`` and ``sample`` are driven by a JSON config with sections
``data``, ``kernel``, ``features``, ``method``, ``optimizer`` and ``output``. The
diagnostic commands write CSV tables and a ``manifest.json`` to ``--outdir``.

Exit codes: 0 success, 1 configuration / schema / cache problems, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diagnostics, gp_core
from .data_io import Dataset, Normalization, load_csv, metrics, normalize_split, synthetic_dataset
from .errors import (
    ConfigError,
    DegenerateSpectrumError,
    FormatError,
    IFFError,
    NumericalFailure,
    SchemaError,
    StaleCacheError,
)
from .features import FrequencyGrid, feature_matrix
from .kernels import FAMILIES, Kernel, density_for
from .precompute import load_summary, save_summary
from .train import METHODS, HyperParams, ModelConfig, OptConfig, fit

log = logging.getLogger("iffgp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
MODEL_FORMAT = 1

DEFAULTS = {
    "data": {
        "source": "synthetic",
        "n": 1000,
        "dim": 1,
        "family": "se",
        "lengthscale": 1.0,
        "variance": 1.0,
        "snr": diagnostics.SNR,
        "noise": None,
        "width": None,
        "seed": 0,
        "path": None,
        "x_columns": None,
        "y_column": "y",
        "train_fraction": 0.8,
        "split_seed": 0,
        "normalize": True,
    },
    "kernel": {
        "family": "se",
        "factors": None,
        "density": "closed",
        "init_lengthscale": 0.2,
        "init_signal_variance": 1.0,
        "init_noise_variance": 1.0,
    },
    "features": {"per_dim_count": 64, "eps": "auto", "mask": "full", "target_pairs": None, "bandwidth": None},
    "method": {"name": "iff", "num_inducing": 50},
    "optimizer": {"max_iters": 1000, "tol": 1e-8, "restarts": 0, "seed": 0},
    "output": {"model": "model.json", "report": "report.json", "summary": "summary.iffsum", "predictions_digits": 17},
}


# ---------------------------------------------------------------- config


def _merge_section(name: str, given) -> dict:
    base = copy.deepcopy(DEFAULTS[name])
    if given is None:
        return base
    if name == "method" and isinstance(given, str):
        given = {"name": given}
    if not isinstance(given, dict):
        raise ConfigError(f"section {name!r} must be an object")
    base.update(given)
    return base


def _unknown_keys(raw: dict) -> list:
    found = [f"{k}" for k in sorted(set(raw) - set(DEFAULTS))]
    for name, given in raw.items():
        if name in DEFAULTS and isinstance(given, dict):
            found += [f"{name}.{k}" for k in sorted(set(given) - set(DEFAULTS[name]))]
    return found


def _positive(section: str, key: str, value, allow_none: bool = False):
    if value is None and allow_none:
        return
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise ConfigError(f"{section}.{key} must be a positive number, got {value!r}")


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError` listing unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = _unknown_keys(raw)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {name: _merge_section(name, raw.get(name)) for name in DEFAULTS}

    d = cfg["data"]
    if d["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {d['source']!r}")
    if d["source"] == "csv":
        if not d["path"] or not d["x_columns"]:
            raise ConfigError("csv data needs data.path and data.x_columns")
    else:
        for key in ("n", "dim", "lengthscale", "variance", "snr"):
            _positive("data", key, d[key])
        _positive("data", "noise", d["noise"], allow_none=True)
        if d["family"] not in FAMILIES or d["family"] == "product":
            raise ConfigError(f"data.family must be one of {FAMILIES[:-1]}")
    if not 0 < d["train_fraction"] <= 1:
        raise ConfigError("data.train_fraction must be in (0, 1]")

    k = cfg["kernel"]
    if k["family"] not in FAMILIES:
        raise ConfigError(f"kernel.family must be one of {FAMILIES}, got {k['family']!r}")
    if k["density"] not in ("closed", "dft"):
        raise ConfigError("kernel.density must be 'closed' or 'dft'")
    init_ls = k["init_lengthscale"]
    for v in np.atleast_1d(np.asarray(init_ls, dtype=object)):
        _positive("kernel", "init_lengthscale", v)
    _positive("kernel", "init_signal_variance", k["init_signal_variance"])
    _positive("kernel", "init_noise_variance", k["init_noise_variance"])

    f = cfg["features"]
    if not (isinstance(f["eps"], str) and f["eps"] == "auto"):
        for v in np.atleast_1d(np.asarray(f["eps"], dtype=object)):
            _positive("features", "eps", v)
    if f["mask"] not in ("full", "spherical"):
        raise ConfigError("features.mask must be 'full' or 'spherical'")

    m = cfg["method"]
    if m["name"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {m['name']!r}")
    o = cfg["optimizer"]
    if not isinstance(o["max_iters"], int) or o["max_iters"] < 0:
        raise ConfigError("optimizer.max_iters must be a nonnegative integer")
    if not isinstance(o["restarts"], int) or o["restarts"] < 0:
        raise ConfigError("optimizer.restarts must be a nonnegative integer")
    _positive("optimizer", "tol", o["tol"])
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve_config(raw)


# ---------------------------------------------------------------- data


def _truth(d: dict):
    kernel = Kernel(d["family"], (float(d["lengthscale"]),) * int(d["dim"]), float(d["variance"]))
    noise = float(d["noise"]) if d["noise"] is not None else diagnostics.snr_noise(kernel, d["snr"])
    return kernel, noise


def load_data(cfg: dict) -> Dataset:
    d = cfg["data"]
    if d["source"] == "csv":
        return load_csv(d["path"], d["x_columns"], d["y_column"])
    kernel, noise = _truth(d)
    data = synthetic_dataset(int(d["n"]), kernel, noise, int(d["seed"]), d["width"])
    cols = tuple(f"x{i}" for i in range(data.dim)) + ("y",)
    return Dataset(data.X, data.y, columns=cols)


def _x_columns(data: Dataset) -> list:
    return list(data.columns[:-1]) if data.columns else [f"x{i}" for i in range(data.dim)]


def _write_xy(path, columns, X, y=None, digits: int = 17):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for i in range(X.shape[0]):
            vals = list(X[i]) + ([] if y is None else [y[i]])
            w.writerow([f"{v:.{digits}g}" for v in vals])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))


# ---------------------------------------------------------------- model


def _model_config(cfg: dict) -> ModelConfig:
    f, k, m = cfg["features"], cfg["kernel"], cfg["method"]
    return ModelConfig(
        method=m["name"],
        kernel_family=k["family"],
        kernel_factors=tuple(k["factors"]) if k["factors"] else None,
        density=k["density"],
        per_dim_count=f["per_dim_count"],
        bandwidth=f["bandwidth"],
        eps=f["eps"],
        mask=f["mask"],
        target_pairs=f["target_pairs"],
        num_inducing=int(m["num_inducing"]),
    )


class Model:
    """A fitted model as stored on disk, able to predict on the unnormalised scale."""

    def __init__(self, meta: dict, base: Path, summary_path: Optional[Path] = None):
        self.meta = meta
        self.method = meta["method"]
        self.params = HyperParams.from_vector(meta["log_params"])
        self.kernel = self.params.kernel(meta["kernel_family"], tuple(meta["kernel_factors"]) if meta["kernel_factors"] else None)
        self.noise = self.params.noise_variance
        self.normalization = Normalization.from_dict(meta["normalization"])
        self.x_columns = meta["x_columns"]
        self.base = base
        self._summary_path = summary_path

    @classmethod
    def load(cls, path, summary_path=None) -> "Model":
        path = Path(path)
        try:
            meta = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"model file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid model file ({exc})") from None
        required = {"format", "method", "log_params", "kernel_family", "kernel_factors", "normalization", "x_columns"}
        missing = sorted(required - set(meta))
        if missing:
            raise SchemaError(f"{path}: model file lacks {missing}")
        if meta["format"] != MODEL_FORMAT:
            raise FormatError(f"{path}: unsupported model format {meta['format']}")
        return cls(meta, path.parent, Path(summary_path) if summary_path else None)

    @property
    def dim(self) -> int:
        return len(self.x_columns)

    def predict_normalized(self, Xn: np.ndarray) -> gp_core.PredictiveMarginals:
        if self.method == "iff":
            grid = FrequencyGrid.from_dict(self.meta["grid"])
            path = self._summary_path or (self.base / self.meta["summary_file"])
            summary = load_summary(path, bytes.fromhex(self.meta["summary_hash"]))
            density = density_for(self.kernel, self.meta.get("density", "closed"))
            return gp_core.iff_predict(summary, grid, self.kernel, self.noise, density, Xn)
        if self.method == "sgpr_kmeans":
            st = self.meta["state"]
            Z = np.asarray(st["inducing"], dtype=float)
            state = gp_core.VariationalState(np.asarray(st["mu_u"], float), np.asarray(st["sigma_u"], float))
            return gp_core.sparse_predict(state, gp_core.inducing_gram(self.kernel, Z)[0], self.kernel.gram(Z, Xn), self.kernel, Xn)
        tr = self.meta["train"]
        return gp_core.exact_predict(np.asarray(tr["X"], float), np.asarray(tr["y"], float), self.kernel, self.noise, Xn)

    def predict(self, X) -> tuple:
        """Mean and latent variance on the unnormalised scale."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        if X.shape[0] == 0:
            return np.zeros(0), np.zeros(0)
        pred = self.predict_normalized(self.normalization.apply_x(X))
        return self.normalization.invert_y(pred.mean), pred.variance * self.normalization.y_scale**2

    @property
    def noise_unnormalized(self) -> float:
        return self.noise * self.normalization.y_scale**2


def predictive_metrics(mean, variance, y, noise: float) -> dict:
    """RMSE / NLPD from unnormalised predictions, latent variances and noise."""
    return metrics(gp_core.PredictiveMarginals(np.asarray(mean), np.asarray(variance)), y, None, noise)


# ---------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["optimizer"]["seed"] = args.seed
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    d = cfg["data"]
    if d["train_fraction"] < 1.0:
        train, test, norm = normalize_split(data, d["train_fraction"], d["split_seed"])
    else:
        norm = Normalization.fit(data.X, data.y) if d["normalize"] else Normalization.identity(data.dim)
        train = Dataset(norm.apply_x(data.X), norm.apply_y(data.y), norm)
        test = Dataset(np.zeros((0, data.dim)), np.zeros(0), norm)
    if not d["normalize"] and d["train_fraction"] < 1.0:
        # split without rescaling: identity map on the same partition
        norm = Normalization.identity(data.dim)
        train = Dataset(train.normalization.invert_x(train.X), train.normalization.invert_y(train.y), norm)
        test = Dataset(test.normalization.invert_x(test.X), test.normalization.invert_y(test.y), norm)

    k, o = cfg["kernel"], cfg["optimizer"]
    mc = _model_config(cfg)
    oc = OptConfig(
        max_iters=o["max_iters"],
        tol=o["tol"],
        restarts=o["restarts"],
        seed=o["seed"],
        init_lengthscale=k["init_lengthscale"],
        init_signal_variance=k["init_signal_variance"],
        init_noise_variance=k["init_noise_variance"],
        threads=args.threads,
        cache_dir=args.cache_dir,
    )
    report = fit(train.X, train.y, mc, oc)
    params = report.final_params
    x_columns = _x_columns(data)

    meta = {
        "format": MODEL_FORMAT,
        "method": mc.method,
        "kernel_family": mc.kernel_family,
        "kernel_factors": list(mc.kernel_factors) if mc.kernel_factors else None,
        "density": mc.density,
        "log_params": params.to_vector().tolist(),
        "hyperparameters": params.to_dict(),
        "normalization": norm.to_dict(),
        "x_columns": x_columns,
    }
    resolved = copy.deepcopy(cfg)
    art = report.artifacts
    if mc.method == "iff":
        grid, summary = art["grid"], art["summary"]
        summary_file = cfg["output"]["summary"]
        save_summary(summary, outdir / summary_file)
        meta.update(grid=grid.to_dict(), summary_file=summary_file, summary_hash=summary.provenance_hash.hex())
        if art.get("cache_path"):
            meta["cache_path"] = art["cache_path"]
        resolved["features"]["eps"] = grid.eps.tolist()
        resolved["features"]["num_features"] = grid.num_features
    elif mc.method == "sgpr_kmeans":
        Z = np.asarray(art["inducing"])
        kernel = params.kernel(mc.kernel_family, mc.kernel_factors)
        state = gp_core.optimal_qu(gp_core.inducing_gram(kernel, Z)[0], kernel.gram(Z, train.X), train.y, params.noise_variance)
        meta["state"] = {"inducing": Z.tolist(), "mu_u": state.mu_u.tolist(), "sigma_u": state.sigma_u.tolist()}
    else:
        meta["train"] = {"X": train.X.tolist(), "y": train.y.tolist()}
    model_path = outdir / cfg["output"]["model"]
    _dump(model_path, meta)

    out = {"config": resolved, "fit": report.to_dict(), "n_train": train.n, "n_test": test.n}
    if test.n:
        model = Model(meta, outdir)
        X_test, y_test = norm.invert_x(test.X), norm.invert_y(test.y)
        digits = cfg["output"]["predictions_digits"]
        _write_xy(outdir / "test.csv", x_columns + [data.columns[-1] if data.columns else "y"], X_test, y_test, digits)
        # metrics are computed from the same rounded inputs a later predict run will read
        X_round = np.array([[float(f"{v:.{digits}g}") for v in row] for row in X_test]).reshape(X_test.shape)
        y_round = np.array([float(f"{v:.{digits}g}") for v in y_test])
        mean, var = model.predict(X_round)
        out["test_metrics"] = predictive_metrics(mean, var, y_round, model.noise_unnormalized)
        out["noise_variance_unnormalized"] = model.noise_unnormalized
    _dump(outdir / cfg["output"]["report"], out)
    print(json.dumps({"model": str(model_path), "converged": report.converged, "objective": report.final_objective, **out.get("test_metrics", {})}))
    return EXIT_OK


def _read_inputs(path, columns: list) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return np.zeros((0, len(columns)))
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: model expects input columns {columns}, missing {missing}")
        idx = [header.index(c) for c in columns]
        rows = []
        for lineno, row in enumerate(reader):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[i]) for i in idx])
            except (ValueError, IndexError):
                raise SchemaError(f"{path}: malformed data row {lineno}") from None
    X = np.asarray(rows, dtype=float).reshape(-1, len(columns))
    bad = np.flatnonzero(~np.all(np.isfinite(X), axis=1))
    if bad.size:
        raise SchemaError(f"{path}: non-finite inputs in rows {bad.tolist()}")
    return X


def cmd_predict(args) -> int:
    model = Model.load(args.model, args.summary)
    X = _read_inputs(args.input, model.x_columns)
    mean, var = model.predict(X)
    out = Path(args.output)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(model.x_columns + ["mean", "variance"])
        for i in range(X.shape[0]):
            w.writerow([f"{v:.17g}" for v in list(X[i]) + [mean[i], var[i]]])
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("sample needs data.source = 'synthetic'")
    data = load_data(cfg)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_xy(outdir / "data.csv", list(data.columns), data.X, data.y)
    return EXIT_OK


def _synthetic_truth(args):
    cfg = load_config(args.config) if args.config else resolve_config({})
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    if cfg["data"]["source"] != "synthetic":
        raise ConfigError("diagnostics need synthetic data with known hyperparameters")
    kernel, noise = _truth(cfg["data"])
    return cfg, load_data(cfg), kernel, noise


def cmd_gap_curve(args) -> int:
    cfg, data, kernel, noise = _synthetic_truth(args)
    o = cfg["optimizer"]
    opt = OptConfig(max_iters=o["max_iters"], tol=o["tol"], restarts=o["restarts"], seed=o["seed"])
    table = diagnostics.gap_curve(data, kernel, noise, args.M, "default", opt, threads=args.threads)
    diagnostics.write_tables([table], args.outdir)
    return EXIT_OK


def cmd_eps_sweep(args) -> int:
    _, data, kernel, noise = _synthetic_truth(args)
    table = diagnostics.epsilon_sweep(data, kernel, noise, args.bandwidths, args.ratios, threads=args.threads)
    diagnostics.write_tables([table], args.outdir)
    return EXIT_OK


def cmd_rate_check(args) -> int:
    kernel = Kernel(args.family, (args.lengthscale,))
    result = diagnostics.rate_check(kernel, args.M, args.eps0, args.q)
    diagnostics.write_tables([result.table], args.outdir)
    print(json.dumps({"slope": result.slope, "predicted": result.predicted}))
    return EXIT_OK


def cmd_timing(args) -> int:
    table = diagnostics.timing_harness(args.N, args.M, args.method, args.reps, args.max_iters, args.seed or 0)
    diagnostics.write_tables([table], args.outdir)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iffgp", description="Sparse GP regression with integrated Fourier features.")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--outdir", default=".", help="directory for outputs")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for precompute and diagnostic rows")
    common.add_argument("--cache-dir", default=None, help="directory for cached data summaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="learn hyperparameters and write a model")
    p.add_argument("config")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="predict at inputs from a CSV file")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--summary", default=None, help="summary file to use instead of the one next to the model")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample", parents=[common], help="write synthetic data to <outdir>/data.csv")
    p.add_argument("config")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gap-curve", parents=[common], help="objective gap against the feature count")
    p.add_argument("--config", default=None)
    p.add_argument("--M", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    p.set_defaults(func=cmd_gap_curve)

    p = sub.add_parser("eps-sweep", parents=[common], help="objective gap over bandwidth and spacing")
    p.add_argument("--config", default=None)
    p.add_argument("--bandwidths", type=float, nargs="+", default=[0.1, 0.2, 0.4, 0.6])
    p.add_argument("--ratios", type=float, nargs="+", default=[0.25, 0.5, 0.75, diagnostics.REFERENCE_RATIO, 2.0])
    p.set_defaults(func=cmd_eps_sweep)

    p = sub.add_parser("rate-check", parents=[common], help="decay rate of the trace term")
    p.add_argument("--family", default="matern12", choices=[f for f in FAMILIES if f != "product"])
    p.add_argument("--lengthscale", type=float, default=1.0)
    p.add_argument("--M", type=int, nargs="+", default=[16, 32, 64, 128, 256, 512, 1024, 2048, 4096])
    p.add_argument("--eps0", type=float, default=1.0)
    p.add_argument("--q", type=float, default=None)
    p.set_defaults(func=cmd_rate_check)

    p = sub.add_parser("timing", parents=[common], help="precompute and per-step cost against N")
    p.add_argument("--N", type=int, nargs="+", default=[10_000, 100_000])
    p.add_argument("--M", type=int, default=200)
    p.add_argument("--method", default="iff", choices=METHODS)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--max-iters", type=int, default=3)
    p.set_defaults(func=cmd_timing)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, DegenerateSpectrumError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StaleCacheError as exc:
        print(f"error: stale cache: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SchemaError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IFFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
