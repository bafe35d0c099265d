import contextlib
import io
import json
from pathlib import Path

import numpy as np
import pytest

from dacglm.cli import build_parser, main

DATA_DIR = Path(__file__).parent / "data"


def write_csv(path, y, X, response="y"):
    p = X.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join([response] + [f"x{j}" for j in range(p)]) + "\n")
        for i in range(len(y)):
            fh.write(",".join(repr(float(v)) for v in [y[i], *X[i]]) + "\n")
    return path


@pytest.fixture
def gaussian_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((150, 4))
    y = X @ np.r_[1.0, -0.5, 0.0, 0.0] + rng.standard_normal(150)
    return write_csv(tmp_path / "data.csv", y, X), y, X


def run_cli(argv, capsys=None):
    return main([str(a) for a in argv])


class TestHelpGoldenFiles:
    @pytest.mark.parametrize("name,argv", [
        ("main", ["--help"]),
        ("fit", ["fit", "--help"]),
        ("combine", ["combine", "--help"]),
        ("partition", ["partition", "--help"]),
        ("simulate", ["simulate", "--help"]),
        ("diagnose", ["diagnose", "--help"]),
        ("report", ["report", "--help"]),
    ])
    def test_help_matches_snapshot(self, name, argv, monkeypatch):
        monkeypatch.setenv("COLUMNS", "80")
        parser = build_parser()
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            with pytest.raises(SystemExit) as excinfo:
                parser.parse_args(argv)
        assert excinfo.value.code == 0
        expected = (DATA_DIR / f"help_{name}.txt").read_text()
        assert buf.getvalue() == expected

    def test_every_fit_flag_documented(self):
        text = (DATA_DIR / "help_fit.txt").read_text()
        for flag in ("--response", "--features", "--family", "--method", "--k",
                     "--seed", "--workers", "--level", "--omega", "--lambda",
                     "--cv", "--intercept", "--allow-partial", "--common-phi",
                     "--shared-lambda", "--emit-summaries", "--out", "--json",
                     "--config"):
            assert flag in text


class TestFit:
    def test_lambda_zero_single_batch_matches_least_squares(self, tmp_path, gaussian_csv):
        path, y, X = gaussian_csv
        out = tmp_path / "out"
        rc = run_cli(["fit", path, "--response", "y", "--family", "gaussian",
                      "--k", "1", "--lambda", "0", "--no-intercept", "--out", out])
        assert rc == 0
        record = json.loads((out / "fit_result.json").read_text())
        ols = np.linalg.solve(X.T @ X, X.T @ y)
        assert np.max(np.abs(np.array(record["beta"]) - ols)) < 1e-8

    def test_validation_error_exits_one_with_json(self, tmp_path, capsys):
        X = np.ones((6, 1))
        y = np.array([0.0, 1.0, 2.0, 0.0, 1.0, 0.0])
        path = write_csv(tmp_path / "bad.csv", y, X)
        rc = run_cli(["fit", path, "--response", "y", "--family", "logistic",
                      "--out", tmp_path / "out"])
        assert rc == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "ValueError"
        assert "logistic" in err["error"]["message"]

    def test_repeat_invocations_are_identical(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        out = tmp_path / "out"
        argv = ["fit", path, "--response", "y", "--method", "modac",
                "--k", "3", "--seed", "9", "--out", out]
        outs = []
        for _ in range(2):
            assert run_cli(argv) == 0
            outs.append(((out / "fit_result.json").read_text(),
                         (out / "coefficients.csv").read_text()))
        assert outs[0] == outs[1]

    def test_mutually_exclusive_lambda_and_cv(self, tmp_path, gaussian_csv, capsys):
        path, _, _ = gaussian_csv
        with pytest.raises(SystemExit) as excinfo:
            run_cli(["fit", path, "--response", "y", "--lambda", "0.1", "--cv"])
        assert excinfo.value.code == 2  # argparse usage error

    def test_unknown_flag_rejected(self, gaussian_csv):
        path, _, _ = gaussian_csv
        with pytest.raises(SystemExit):
            run_cli(["fit", path, "--response", "y", "--frobnicate"])

    def test_voting_method(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        out = tmp_path / "out"
        rc = run_cli(["fit", path, "--response", "y", "--method", "voting",
                      "--k", "3", "--omega", "1", "--out", out])
        assert rc == 0
        record = json.loads((out / "fit_result.json").read_text())
        assert record["combiner"] == "voting"
        assert record["diagnostics"]["omega"] == 1
        # off-block coefficients carry null inference entries
        assert any(se is None for se in record["se"]) or all(
            se is not None for se in record["se"])

    def test_lasso_method_emits_sparse_estimates_without_inference(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        out = tmp_path / "out"
        rc = run_cli(["fit", path, "--response", "y", "--method", "lasso",
                      "--seed", "2", "--out", out])
        assert rc == 0
        record = json.loads((out / "fit_result.json").read_text())
        assert record["combiner"] == "lasso"
        assert all(se is None for se in record["se"])
        assert (out / "coefficients.csv").exists()

    def test_config_file_precedence(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"k": 2, "seed": 5, "intercept": False}))
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        rc = run_cli(["fit", path, "--response", "y", "--config", config,
                      "--out", out1])
        assert rc == 0
        rec1 = json.loads((out1 / "fit_result.json").read_text())
        assert rec1["K"] == 2
        assert rec1["config"]["seed"] == 5
        # explicit flag beats the config file
        rc = run_cli(["fit", path, "--response", "y", "--config", config,
                      "--k", "3", "--out", out2])
        rec2 = json.loads((out2 / "fit_result.json").read_text())
        assert rec2["K"] == 3

    def test_unknown_config_key_rejected(self, tmp_path, gaussian_csv, capsys):
        path, _, _ = gaussian_csv
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"bogus": 1}))
        rc = run_cli(["fit", path, "--response", "y", "--config", config])
        assert rc == 1
        assert "bogus" in capsys.readouterr().err

    def test_fit_accepts_shard_manifest(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        rc = run_cli(["partition", path, "--response", "y", "--k", "2",
                      "--seed", "4", "--out-dir", tmp_path / "shards"])
        assert rc == 0
        out = tmp_path / "out"
        rc = run_cli(["fit", tmp_path / "shards" / "manifest.json",
                      "--seed", "4", "--no-intercept", "--out", out])
        assert rc == 0
        record = json.loads((out / "fit_result.json").read_text())
        assert record["K"] == 2

    def test_partial_combine_exits_two(self, tmp_path, capsys):
        # shard 0 is perfectly separated: its logistic MLE fails, and
        # --allow-partial downgrades the failure to exit code 2
        x_sep = np.linspace(-1, 1, 40)
        y_sep = (x_sep > 0).astype(float)
        rng = np.random.default_rng(5)
        x_ok = rng.standard_normal(40)
        y_ok = (rng.random(40) < 0.5).astype(float)
        write_csv(tmp_path / "shard_sep.csv", y_sep, x_sep.reshape(-1, 1))
        write_csv(tmp_path / "shard_ok.csv", y_ok, x_ok.reshape(-1, 1))
        manifest = {
            "schema": {"response": "y", "features": ["x0"]},
            "shards": [
                {"path": "shard_sep.csv", "row_count": 40, "checksum": ""},
                {"path": "shard_ok.csv", "row_count": 40, "checksum": ""},
            ],
        }
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        out = tmp_path / "out"
        with pytest.warns(RuntimeWarning):
            rc = run_cli(["fit", tmp_path / "manifest.json", "--family",
                          "logistic", "--method", "meta", "--no-intercept",
                          "--allow-partial", "--out", out])
        assert rc == 2
        record = json.loads((out / "fit_result.json").read_text())
        assert record["N"] == 40
        assert record["diagnostics"]["failed_batches"][0]["batch"] == 0


class TestCombine:
    def _emit(self, tmp_path, gaussian_csv, k=2, seed=3):
        path, _, _ = gaussian_csv
        out = tmp_path / "fit_out"
        rc = run_cli(["fit", path, "--response", "y", "--method", "modac",
                      "--k", k, "--seed", seed, "--no-intercept",
                      "--out", out, "--emit-summaries", tmp_path / "sums"])
        assert rc == 0
        return out, sorted((tmp_path / "sums").glob("batch_*.json"))

    def test_single_summary_passthrough(self, tmp_path, gaussian_csv):
        _, sums = self._emit(tmp_path, gaussian_csv, k=1)
        out = tmp_path / "combined"
        rc = run_cli(["combine", sums[0], "--out", out])
        assert rc == 0
        record = json.loads((out / "fit_result.json").read_text())
        assert record["K"] == 1

    def test_round_trip_matches_in_process_combination(self, tmp_path, gaussian_csv):
        fit_out, sums = self._emit(tmp_path, gaussian_csv, k=3, seed=8)
        out = tmp_path / "combined"
        rc = run_cli(["combine", *sums, "--out", out])
        assert rc == 0
        direct = json.loads((fit_out / "fit_result.json").read_text())
        recombined = json.loads((out / "fit_result.json").read_text())
        assert direct["beta"] == recombined["beta"]
        assert direct["se"] == recombined["se"]

    def test_corrupt_file_names_path(self, tmp_path, capsys):
        bad = tmp_path / "broken.json"
        bad.write_text("{")
        rc = run_cli(["combine", bad])
        assert rc == 1
        assert "broken.json" in capsys.readouterr().err

    def test_dimension_mismatch_names_files(self, tmp_path, capsys):
        from dacglm.inference import BatchSummary, save_summary

        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        save_summary(BatchSummary(beta_c=np.zeros(2), precision=np.eye(2), n=5,
                                  phi_hat=1.0, lam=0.0), a)
        save_summary(BatchSummary(beta_c=np.zeros(3), precision=np.eye(3), n=5,
                                  phi_hat=1.0, lam=0.0), b)
        rc = run_cli(["combine", a, b])
        assert rc == 1
        err = capsys.readouterr().err
        assert "dimension" in err


class TestPartitionAndDiagnose:
    def test_partition_writes_manifest(self, tmp_path, gaussian_csv):
        path, _, _ = gaussian_csv
        rc = run_cli(["partition", path, "--response", "y", "--k", "3",
                      "--out-dir", tmp_path / "shards"])
        assert rc == 0
        manifest = json.loads((tmp_path / "shards" / "manifest.json").read_text())
        assert len(manifest["shards"]) == 3
        assert sum(s["row_count"] for s in manifest["shards"]) == 150

    def test_diagnose_text_and_json(self, tmp_path, gaussian_csv, capsys):
        path, _, _ = gaussian_csv
        rc = run_cli(["diagnose", path, "--response", "y", "--k", "2"])
        assert rc == 0
        text = capsys.readouterr().out
        assert "sigma_min" in text
        rc = run_cli(["diagnose", path, "--response", "y", "--json"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report[0]["n"] == 150

    def test_diagnose_requires_response_for_csv(self, gaussian_csv, capsys):
        path, _, _ = gaussian_csv
        rc = run_cli(["diagnose", path])
        assert rc == 1


class TestSimulateAndReport:
    def test_smoke_run_and_figures(self, tmp_path, capsys):
        import time

        out = tmp_path / "study"
        t0 = time.perf_counter()
        rc = run_cli(["simulate", "--family", "gaussian", "--n", "200", "--p", "6",
                      "--k", "2", "--s0", "2", "--n-reps", "1", "--seed", "3",
                      "--methods", "MODAC,LASSO", "--out-dir", out])
        assert time.perf_counter() - t0 < 30.0
        assert rc == 0
        assert (out / "study_summary.csv").exists()
        assert (out / "study_raw.jsonl").exists()
        assert (out / "study_long.csv").exists()
        rc = run_cli(["report", out, "--out-dir", tmp_path / "figs"])
        assert rc == 0
        assert (tmp_path / "figs" / "report_summary.csv").exists()
        assert any((tmp_path / "figs").glob("*.png"))

    def test_omega_sweep_rows(self, tmp_path):
        out = tmp_path / "study"
        rc = run_cli(["simulate", "--family", "gaussian", "--n", "200", "--p", "6",
                      "--k", "3", "--s0", "2", "--n-reps", "1", "--seed", "4",
                      "--methods", "VOTING", "--omega-sweep", "--out-dir", out])
        assert rc == 0
        summary = (out / "study_summary.csv").read_text()
        for omega in range(3):
            assert f"VOTING(omega={omega})" in summary

    def test_preset_desk_overridable(self, tmp_path):
        out = tmp_path / "study"
        rc = run_cli(["simulate", "--preset", "desk", "--n-reps", "1",
                      "--n", "200", "--p", "8", "--k", "2", "--s0", "2",
                      "--methods", "MODAC", "--out-dir", out])
        assert rc == 0
        config = json.loads((out / "study_config.json").read_text())
        assert config["N"] == 200      # explicit flag wins
        assert config["rho"] == 0.8    # preset value kept

    def test_simulate_deterministic_outputs(self, tmp_path):
        texts = []
        for name in ("a", "b"):
            out = tmp_path / name
            rc = run_cli(["simulate", "--family", "gaussian", "--n", "160",
                          "--p", "5", "--k", "2", "--s0", "1", "--n-reps", "1",
                          "--seed", "12", "--methods", "LASSO", "--out-dir", out])
            assert rc == 0
            raw = [json.loads(line) for line in
                   (out / "study_raw.jsonl").read_text().splitlines()]
            for rec in raw:
                rec.pop("wall_time_s", None)
            texts.append(json.dumps(raw, sort_keys=True))
        assert texts[0] == texts[1]
