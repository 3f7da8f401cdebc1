import csv
import json

import numpy as np
import pytest

from iffgp import cli
from iffgp.cli import main, resolve_config
from iffgp.errors import ConfigError


def _write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, len(rows[0]))


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("fit")
    cfg = _write_config(
        root / "cfg.json",
        data={"n": 300, "seed": 3},
        features={"per_dim_count": 128},
        optimizer={"max_iters": 200},
    )
    assert main(["fit", cfg, "--outdir", str(root / "out")]) == 0
    return root


class TestConfig:
    def test_defaults_fill_in(self):
        cfg = resolve_config({"data": {"n": 10}})
        assert cfg["data"]["n"] == 10 and cfg["features"]["eps"] == "auto"

    def test_unknown_keys_listed(self):
        with pytest.raises(ConfigError, match="colour.*flavour|flavour.*colour"):
            resolve_config({"data": {"colour": 1}, "kernel": {"flavour": 2}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="extras"):
            resolve_config({"extras": {}})

    def test_method_string(self):
        assert resolve_config({"method": "exact"})["method"]["name"] == "exact"

    @pytest.mark.parametrize("section, key, value", [("kernel", "init_lengthscale", -1.0), ("optimizer", "tol", 0.0), ("data", "n", 0)])
    def test_nonpositive_rejected(self, section, key, value):
        with pytest.raises(ConfigError):
            resolve_config({section: {key: value}})


class TestFit:
    def test_minimal_config(self, fitted):
        out = fitted / "out"
        report = json.loads((out / "report.json").read_text())
        assert (out / "model.json").exists() and (out / "summary.iffsum").exists()
        assert report["n_train"] == 240 and report["n_test"] == 60
        assert isinstance(report["config"]["features"]["eps"], list)
        assert report["config"]["features"]["num_features"] == 128
        assert set(report["test_metrics"]) == {"rmse", "nlpd"}

    def test_negative_lengthscale_exit_1(self, tmp_path, capsys):
        cfg = _write_config(tmp_path / "c.json", kernel={"init_lengthscale": -0.2})
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 1
        assert "init_lengthscale" in capsys.readouterr().err

    def test_unknown_key_exit_1(self, tmp_path, capsys):
        cfg = _write_config(tmp_path / "c.json", optimizer={"maxiter": 3})
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 1
        assert "maxiter" in capsys.readouterr().err

    def test_missing_config_exit_1(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope.json")]) == 1

    def test_numerical_failure_exit_2(self, tmp_path, monkeypatch):
        from iffgp.errors import NumericalFailure

        def boom(*a, **k):
            raise NumericalFailure("forced")

        monkeypatch.setattr(cli, "fit", boom)
        cfg = _write_config(tmp_path / "c.json", data={"n": 50})
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 2

    def test_cache_dir_rerun(self, tmp_path):
        cfg = _write_config(
            tmp_path / "c.json",
            data={"n": 60_000, "train_fraction": 1.0},
            features={"per_dim_count": 128},
            optimizer={"max_iters": 2},
        )
        cache = str(tmp_path / "cache")
        times = []
        for run in ("a", "b"):
            assert main(["fit", cfg, "--outdir", str(tmp_path / run), "--cache-dir", cache]) == 0
            fit = json.loads((tmp_path / run / "report.json").read_text())["fit"]
            times.append((fit["precompute_seconds"], fit["cache_hit"]))
        assert times[0][1] is False and times[1][1] is True
        assert times[1][0] < 0.1 * times[0][0]

    @pytest.mark.parametrize("method", ["sgpr_kmeans", "exact"])
    def test_baselines(self, tmp_path, method):
        cfg = _write_config(tmp_path / "c.json", data={"n": 150}, method={"name": method, "num_inducing": 20}, optimizer={"max_iters": 30})
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 0
        _, rows = _read_csv(tmp_path / "test.csv")
        assert main(["predict", str(tmp_path / "model.json"), str(tmp_path / "test.csv"), str(tmp_path / "p.csv")]) == 0
        header, pred = _read_csv(tmp_path / "p.csv")
        assert header == ["x0", "mean", "variance"]
        m = cli.predictive_metrics(pred[:, 1], pred[:, 2], rows[:, 1], cli.Model.load(tmp_path / "model.json").noise_unnormalized)
        report = json.loads((tmp_path / "report.json").read_text())
        assert m["rmse"] == pytest.approx(report["test_metrics"]["rmse"], abs=1e-8)


class TestPredict:
    def test_round_trip_metrics(self, fitted):
        out = fitted / "out"
        assert main(["predict", str(out / "model.json"), str(out / "test.csv"), str(out / "pred.csv")]) == 0
        _, test = _read_csv(out / "test.csv")
        header, pred = _read_csv(out / "pred.csv")
        assert header == ["x0", "mean", "variance"]
        np.testing.assert_array_equal(pred[:, 0], test[:, 0])
        noise = json.loads((out / "report.json").read_text())["noise_variance_unnormalized"]
        m = cli.predictive_metrics(pred[:, 1], pred[:, 2], test[:, 1], noise)
        recorded = json.loads((out / "report.json").read_text())["test_metrics"]
        assert m["rmse"] == pytest.approx(recorded["rmse"], abs=1e-8)
        assert m["nlpd"] == pytest.approx(recorded["nlpd"], abs=1e-8)

    def test_interpolates_near_noiseless(self, tmp_path):
        cfg = _write_config(
            tmp_path / "c.json",
            data={"n": 200, "noise": 1e-4, "train_fraction": 1.0, "seed": 1},
            features={"per_dim_count": 256},
            optimizer={"max_iters": 300},
        )
        assert main(["sample", cfg, "--outdir", str(tmp_path)]) == 0
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 0
        assert main(["predict", str(tmp_path / "model.json"), str(tmp_path / "data.csv"), str(tmp_path / "p.csv")]) == 0
        _, data = _read_csv(tmp_path / "data.csv")
        _, pred = _read_csv(tmp_path / "p.csv")
        err = np.abs(pred[:, 1] - data[:, 1])
        assert np.median(err) < 0.05 * data[:, 1].std()

    def test_empty_input(self, fitted, tmp_path):
        (tmp_path / "in.csv").write_text("x0\n")
        assert main(["predict", str(fitted / "out" / "model.json"), str(tmp_path / "in.csv"), str(tmp_path / "o.csv")]) == 0
        assert (tmp_path / "o.csv").read_text().splitlines() == ["x0,mean,variance"]

    def test_fully_empty_input(self, fitted, tmp_path):
        (tmp_path / "in.csv").write_text("")
        assert main(["predict", str(fitted / "out" / "model.json"), str(tmp_path / "in.csv"), str(tmp_path / "o.csv")]) == 0
        assert (tmp_path / "o.csv").read_text().splitlines() == ["x0,mean,variance"]

    def test_wrong_columns(self, fitted, tmp_path):
        (tmp_path / "in.csv").write_text("a,b\n1,2\n")
        assert main(["predict", str(fitted / "out" / "model.json"), str(tmp_path / "in.csv"), str(tmp_path / "o.csv")]) == 1

    def test_stale_summary(self, fitted, tmp_path):
        cfg = _write_config(tmp_path / "c.json", data={"n": 100, "seed": 9}, features={"per_dim_count": 128}, optimizer={"max_iters": 3})
        assert main(["fit", cfg, "--outdir", str(tmp_path)]) == 0
        (tmp_path / "in.csv").write_text("x0\n0.5\n")
        code = main(
            ["predict", str(fitted / "out" / "model.json"), str(tmp_path / "in.csv"), str(tmp_path / "o.csv"), "--summary", str(tmp_path / "summary.iffsum")]
        )
        assert code == 1


class TestDiagnosticCommands:
    def test_rate_check(self, tmp_path):
        assert main(["rate-check", "--family", "matern32", "--M", "16", "64", "256", "--outdir", str(tmp_path)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert "rate_check" in manifest and (tmp_path / "rate_check.csv").exists()

    def test_gap_curve_and_sweep(self, tmp_path):
        cfg = _write_config(tmp_path / "c.json", data={"n": 100}, optimizer={"max_iters": 5})
        assert main(["gap-curve", "--config", cfg, "--M", "8", "16", "--outdir", str(tmp_path)]) == 0
        assert main(["eps-sweep", "--config", cfg, "--bandwidths", "0.3", "--ratios", "0.5", "0.95", "--outdir", str(tmp_path)]) == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert {"gap_curve", "eps_sweep"} <= set(manifest)
        assert manifest["eps_sweep"]["axes"]["reference_line"] == 0.95

    def test_timing(self, tmp_path):
        assert main(["timing", "--N", "200", "--M", "8", "--reps", "1", "--max-iters", "1", "--outdir", str(tmp_path)]) == 0
        header, rows = _read_csv(tmp_path / "timing_iff.csv")
        assert header == ["N", "M", "precompute_seconds", "mean_step_seconds"] and rows.shape == (1, 4)
