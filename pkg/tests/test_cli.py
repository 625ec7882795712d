import json
from pathlib import Path

import pytest

import smjls
from smjls.cli import main

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
SCALAR = str(CONFIG_DIR / "scalar.yaml")
BETHEDGING = str(CONFIG_DIR / "bethedging.yaml")


def run(tmp_path, *argv):
    report = tmp_path / "report.json"
    code = main([argv[0], argv[1], "--report", str(report), *argv[2:]])
    doc = json.loads(report.read_text()) if report.exists() else None
    return code, doc


class TestDecayRate:
    def test_scalar_gamma(self, tmp_path, capsys):
        code, doc = run(tmp_path, "decay-rate", SCALAR)
        out = capsys.readouterr().out
        assert code == 0
        assert "gamma=2.000000" in out
        assert "verdict: stable" in out
        assert doc["results"]["gamma"] == pytest.approx(2.0, abs=1e-6)
        assert doc["results"]["stable"] is True

    def test_report_structure(self, tmp_path):
        code, doc = run(tmp_path, "decay-rate", SCALAR, "--tol", "1e-10")
        assert code == 0
        assert doc["tool"] == "smjls"
        assert doc["version"] == smjls.__version__
        assert doc["command"] == "decay-rate"
        assert doc["config_path"].endswith("scalar.yaml")
        assert doc["inputs"]["config"]["kind"] == "system"
        assert doc["inputs"]["flags"]["tol"] == 1e-10
        assert doc["seed"] is None
        assert doc["timing_seconds"] >= 0.0

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code, doc = run(tmp_path, "decay-rate", str(tmp_path / "absent.yaml"))
        assert code == 2
        assert doc is None
        assert "config error" in capsys.readouterr().err

    def test_wrong_theta_count_exits_2(self, tmp_path, capsys):
        code, _ = run(tmp_path, "decay-rate", SCALAR, "--theta", "1.0")
        assert code == 2
        assert "--theta needs 0 value(s)" in capsys.readouterr().err

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["decay-rate"])
        assert exc.value.code == 2


class TestOptimize:
    def test_budget_solve_with_certificate(self, tmp_path, capsys):
        code, doc = run(
            tmp_path,
            "optimize",
            BETHEDGING,
            "--mode",
            "budget",
            "--certify",
            "25",
            "--seed",
            "1",
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "status: optimal" in out
        res = doc["results"]
        assert res["status"] == "optimal"
        assert res["effective_budget"] == pytest.approx(22.0)
        assert res["kkt_residual"] < 1e-5
        cert = res["certificate"]
        assert cert["passed"] is True
        assert cert["samples"] == 25
        # spend-it-all: the budget constraint is active at the optimum
        assert sum(doc["results"]["theta_star"]) == pytest.approx(22.0, rel=1e-5)

    def test_budget_flag_shifts_by_offsets(self, tmp_path):
        code, doc = run(
            tmp_path, "optimize", BETHEDGING, "--mode", "budget", "--budget", "2.0"
        )
        assert code == 0
        assert doc["results"]["effective_budget"] == pytest.approx(22.0)

    def test_budget_mode_needs_flag_for_system_config(self, tmp_path, capsys):
        code, _ = run(tmp_path, "optimize", SCALAR, "--mode", "budget")
        assert code == 2
        assert "needs --budget" in capsys.readouterr().err

    def test_performance_needs_target(self, tmp_path, capsys):
        code, _ = run(tmp_path, "optimize", BETHEDGING, "--mode", "performance")
        assert code == 2
        assert "--target-rate" in capsys.readouterr().err

    def test_performance_without_cost_exits_2(self, tmp_path, capsys):
        code, _ = run(
            tmp_path, "optimize", SCALAR, "--mode", "performance", "--target-rate", "1.0"
        )
        assert code == 2
        assert "config error" in capsys.readouterr().err

    def test_unreachable_target_exits_4(self, tmp_path, capsys):
        code, doc = run(
            tmp_path,
            "optimize",
            BETHEDGING,
            "--mode",
            "performance",
            "--target-rate",
            "50.0",
        )
        assert code == 4
        assert "no feasible design" in capsys.readouterr().err
        assert doc["results"]["status"] == "infeasible"

    def test_empty_interior_exits_4(self, tmp_path):
        # raw budget 0 leaves only the corner where every dose is zero
        code, doc = run(
            tmp_path, "optimize", BETHEDGING, "--mode", "budget", "--budget", "0.0"
        )
        assert code == 4
        assert doc["results"]["status"] == "infeasible"


class TestSimulate:
    def test_small_run_skips_fit(self, tmp_path, capsys):
        out_prefix = str(tmp_path / "sim")
        code, doc = run(
            tmp_path,
            "simulate",
            SCALAR,
            "--samples",
            "5",
            "--horizon",
            "10.0",
            "--out",
            out_prefix,
        )
        out = capsys.readouterr().out
        assert code == 0
        assert "ensemble fit skipped" in out
        assert doc["results"]["gamma_hat"] is None
        assert (tmp_path / "sim_switches.csv").exists()
        assert not (tmp_path / "sim_mean_norms.csv").exists()

    def test_large_run_fits_gamma(self, tmp_path, capsys):
        out_prefix = str(tmp_path / "big")
        code, doc = run(
            tmp_path,
            "simulate",
            SCALAR,
            "--samples",
            "120",
            "--horizon",
            "20.0",
            "--out",
            out_prefix,
        )
        assert code == 0
        assert "gamma_hat=" in capsys.readouterr().out
        # deterministic scalar flow: the fit recovers the exact rate
        assert doc["results"]["gamma_hat"] == pytest.approx(2.0, abs=1e-6)
        assert (tmp_path / "big_mean_norms.csv").exists()

    def test_seed_reproduces_csv_bytes(self, tmp_path):
        args = ["--samples", "5", "--horizon", "10.0", "--seed", "7"]
        run(tmp_path, "simulate", SCALAR, "--out", str(tmp_path / "a"), *args)
        run(tmp_path, "simulate", SCALAR, "--out", str(tmp_path / "b"), *args)
        a = (tmp_path / "a_switches.csv").read_bytes()
        b = (tmp_path / "b_switches.csv").read_bytes()
        assert a == b


class TestSweep:
    def test_single_point_dose_response(self, tmp_path, capsys):
        csv = tmp_path / "grid.csv"
        code, doc = run(
            tmp_path,
            "sweep",
            BETHEDGING,
            "--experiment",
            "dose-response",
            "--sharpness-grid",
            "0.01",
            "--budget-grid",
            "2.0",
            "--out",
            str(csv),
        )
        assert code == 0
        assert "1 points" in capsys.readouterr().out
        assert doc["results"]["failed"] == 0
        assert doc["results"]["statuses"] == ["optimal"]
        lines = csv.read_text().strip().splitlines()
        assert len(lines) == 2 and lines[0].startswith("sharpness")

    def test_requires_bethedging_config(self, tmp_path, capsys):
        code, _ = run(tmp_path, "sweep", SCALAR, "--experiment", "dose-response")
        assert code == 2
        assert "bethedging" in capsys.readouterr().err

    def test_bad_grid_token_exits_2(self, tmp_path, capsys):
        code, _ = run(
            tmp_path,
            "sweep",
            BETHEDGING,
            "--experiment",
            "sojourn-shape",
            "--scale-grid",
            "6.5,oops",
        )
        assert code == 2
        assert "comma-separated numbers" in capsys.readouterr().err


class TestReportFiles:
    def test_report_is_valid_sorted_json(self, tmp_path):
        report = tmp_path / "r.json"
        main(["decay-rate", SCALAR, "--report", str(report)])
        text = report.read_text()
        doc = json.loads(text)
        assert text == json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def test_failed_runs_leave_no_report(self, tmp_path):
        report = tmp_path / "r.json"
        code = main(["decay-rate", SCALAR, "--theta", "3.0", "--report", str(report)])
        assert code == 2
        assert not report.exists()
