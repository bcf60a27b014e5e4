from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from kinkbunch.cli import EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, UNIDENTIFIED, main

POLICY = ["--z-star", "100", "--t", "0.2", "--delta-t", "0.3"]
OUTCOME = ["--set", "poly_order_outcome=6", "--set", "outcome_lower=60", "--set", "outcome_upper=170"]


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    out = d / "s.csv"
    assert main(["simulate", *POLICY, "--n-agents", "30000", "--seed", "2", "--out", str(out)]) == EXIT_OK
    return out


def test_simulate_writes_samples_and_truth(simulated):
    with open(simulated, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["agent_id", "z", "y", "group"]
    assert len(rows) == 30_001
    truth = json.loads((simulated.parent / "truth.json").read_text())
    assert set(truth) == {"manifest", "truth", "roles"}
    assert truth["truth"]["delta_z_star"] == pytest.approx(26.4911, abs=1e-4)
    assert len(truth["roles"]) == 30_000
    assert truth["manifest"]["seed"] == 2


def test_estimate_report_schema(simulated, tmp_path):
    rc = main(["estimate", str(simulated), *POLICY, *OUTCOME, "--out-dir", str(tmp_path / "o"), "--baseline"])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    for key in ("delta_z_star", "excess_bunching", "elasticity", "mu", "lambda", "te_shifter",
                "te_buncher", "te_buncher_structural", "converged", "baseline", "manifest"):
        assert key in report
    assert report["delta_z_star"] == pytest.approx(26.4911, rel=0.05)
    assert report["manifest"]["policy"]["delta_t"] == 0.3
    assert report["manifest"]["config"]["poly_order_outcome"] == 6
    with open(tmp_path / "o" / "density_bins.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["bin_center", "observed", "counterfactual", "shifter_extrapolated"]


def test_bootstrap_section(simulated, tmp_path):
    rc = main(["estimate", str(simulated), *POLICY, *OUTCOME, "--out-dir", str(tmp_path),
               "--bootstrap", "5", "--seed", "3"])
    assert rc == EXIT_OK
    se = json.loads((tmp_path / "report.json").read_text())["se"]
    assert se["reps"] == 5 and se["mu"] > 0


def test_config_file_and_overrides(simulated, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# standard kink\nz_star = 100\nt = 0.2\ndelta_t = 0.3\npoly_order_outcome = 6\n")
    rc = main(["estimate", str(simulated), "--config", str(cfg), "--set", "poly_order_outcome=5",
               "--out-dir", str(tmp_path)])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["manifest"]["config"]["poly_order_outcome"] == 5


def test_high_rate_side(simulated, tmp_path):
    rc = main(["estimate", str(simulated), *POLICY, *OUTCOME, "--set", "counterfactual_side=high_rate",
               "--out-dir", str(tmp_path)])
    assert rc == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["delta_z_star"] == pytest.approx(20.9431, rel=0.05)
    assert report["never_taker_te"] == pytest.approx(1.5, rel=0.1)


def test_full_rate_elasticity_is_unidentified(simulated, tmp_path):
    # the bunching in the data is real; only the declared upper rate changes
    pol = ["--z-star", "100", "--t", "0.5", "--delta-t", "0.5"]
    main(["estimate", str(simulated), *pol, "--out-dir", str(tmp_path)])
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["elasticity"] == UNIDENTIFIED
    assert report["delta_z_star"] > 0


def test_empty_population_writes_header_only(tmp_path):
    out = tmp_path / "empty.csv"
    assert main(["simulate", *POLICY, "--n-agents", "0", "--out", str(out)]) == EXIT_OK
    assert out.read_text() == "agent_id,z,y,group\n"


def test_bad_rows_are_listed(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("agent_id,z,y\n0,50,1\n1,-3,1\n2,abc,1\n3,80\n")
    assert main(["estimate", str(bad), *POLICY, "--out-dir", str(tmp_path)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "line 3" in err and "line 4" in err and "line 5" in err


def test_bad_header_and_missing_policy(simulated, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,value\n0,1\n")
    assert main(["estimate", str(bad), *POLICY, "--out-dir", str(tmp_path)]) == EXIT_INPUT
    assert main(["estimate", str(simulated), "--out-dir", str(tmp_path)]) == EXIT_INPUT
    assert main(["estimate", str(simulated), *POLICY, "--set", "nonsense=1", "--out-dir", str(tmp_path)]) == EXIT_INPUT


def test_iteration_cap_reports_nonconvergence(simulated, tmp_path):
    rc = main(["estimate", str(simulated), *POLICY, "--set", "max_iterations=1", "--out-dir", str(tmp_path)])
    assert rc == EXIT_NONCONVERGED
    assert json.loads((tmp_path / "report.json").read_text())["converged"] is False


def test_policy_scan_from_truth(simulated, tmp_path):
    out = tmp_path / "scan.csv"
    rc = main(["policy-scan", str(simulated), "--calibration", str(simulated.parent / "truth.json"),
               *POLICY, "--alt", "delta_t=0", "--alt", "delta_t=0.5", "--out", str(out)])
    assert rc == EXIT_OK
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    totals = [float(r["total_z"]) for r in rows]
    assert len(rows) == 3 and totals[1] == max(totals) and totals[2] == min(totals)


def test_pipe_between_commands(tmp_path):
    sim = subprocess.run([sys.executable, "-m", "kinkbunch.cli", "simulate", *POLICY, "--n-agents", "20000",
                          "--seed", "4", "--truth", str(tmp_path / "t.json")],
                         capture_output=True, check=True)
    est = subprocess.run([sys.executable, "-m", "kinkbunch.cli", "estimate", "-", *POLICY, "--report", "-",
                          "--out-dir", str(tmp_path)], input=sim.stdout, capture_output=True, check=True)
    report = json.loads(est.stdout)
    assert report["manifest"]["input_path"] == "-"
    assert report["delta_z_star"] > 0
