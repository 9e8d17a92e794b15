import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from robust_mflqg.cli import UsageError, main, parse_horizon, resolve_scenario
from robust_mflqg.model import shipped_scenario


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def scenario_file(tmp_path, **changes):
    data = json.loads(shipped_scenario("paper_example").read_text())
    data.update(changes)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(data))
    return path


def test_check_exit_codes(tmp_path):
    assert main(["check", "paper_example", "--out", str(tmp_path / "a"), "--samples", "50"]) == 0
    assert main(["check", "blowup_case", "--out", str(tmp_path / "b"), "--samples", "50"]) == 1
    rep = json.loads((tmp_path / "b" / "convexity.json").read_text())
    assert rep


def test_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["check", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["check", str(scenario_file(tmp_path, Q=[[-1.0]])), "--out", str(tmp_path)]) == 2
    assert main(["sweep", "paper_example", "--Ns", "16", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "paper_example", "--bogus"]) == 2
    assert main(["synthesize", "no_such_scenario", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_synthesize_outputs(tmp_path):
    out = tmp_path / "syn"
    assert main(["synthesize", "paper_example", "--out", str(out), "--detect-z-blowup"]) == 0
    head, P = read_csv(out / "riccati_P.csv")
    assert head == ["t", "P_00"] and len(P) == 2001
    assert np.max(np.abs(P[:, 1] - (-1.0 / (P[:, 0] + 1.0) - 0.5))) <= 1e-8
    for name in ("riccati_K.csv", "riccati_Ptilde.csv", "consistency.csv", "law.json",
                 "manifest.json"):
        assert (out / name).exists()
    z = json.loads((out / "z_blowup.json").read_text())
    assert abs(z["time"] - 0.758276) <= 5e-3
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "synthesize" and len(man["scenario_sha256"]) == 64


def test_refuses_uncertified_without_force(tmp_path):
    out = tmp_path / "bc"
    assert main(["synthesize", "blowup_case", "--out", str(out)]) == 1
    assert not (out / "riccati_P.csv").exists()


def test_homogeneous_profile_is_zero(tmp_path):
    assert main(["synthesize", "homogeneous", "--out", str(tmp_path), "--steps", "200"]) == 0
    head, rows = read_csv(tmp_path / "consistency.csv")
    assert head[0] == "t" and np.all(rows[:, 1:] == 0)


def test_simulate_is_reproducible(tmp_path):
    args = ["simulate", "paper_example", "--N", "8", "--replications", "4", "--seed", "3",
            "--steps", "400"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("costs.csv", "meanfield_error.csv", "cost_stats.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() != b""
        if name != "manifest.json":
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    args = ["simulate", "paper_example", "--N", "8", "--replications", "2", "--steps", "200"]
    monkeypatch.setenv("MFG_SEED", "9")
    assert main(args + ["--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("MFG_SEED")
    assert main(args + ["--seed", "9", "--out", str(tmp_path / "flag")]) == 0
    assert ((tmp_path / "env" / "costs.csv").read_bytes()
            == (tmp_path / "flag" / "costs.csv").read_bytes())
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 9
    monkeypatch.setenv("MFG_SEED", "nine")
    assert main(args + ["--out", str(tmp_path / "bad")]) == 2


def test_noise_free_mean_field_error_is_zero(tmp_path):
    path = scenario_file(tmp_path, sigma=[[0.0]], init_spread=0.0)
    out = tmp_path / "quiet"
    assert main(["simulate", str(path), "--N", "8", "--replications", "2", "--steps", "200",
                 "--out", str(out)]) == 0
    _, rows = read_csv(out / "meanfield_error.csv")
    assert rows[0, 1] == 0 and rows[0, 2] == 0


def test_horizon_override(tmp_path):
    out = tmp_path / "inf"
    assert main(["synthesize", "scalar_infinite", "--horizon-override", "infinite:0.5",
                 "--out", str(out)]) == 0
    _, P = read_csv(out / "riccati_P.csv")
    assert P.shape == (1, 2)
    assert parse_horizon("finite:2").T == 2.0
    with pytest.raises(UsageError):
        parse_horizon("weekly:3")


def test_resolve_scenario_accepts_names_and_paths(tmp_path):
    assert resolve_scenario("paper_example") == shipped_scenario("paper_example")
    p = scenario_file(tmp_path)
    assert resolve_scenario(str(p)) == p


def test_verify_without_rate(tmp_path):
    assert main(["verify-paper-example", "--skip-rate", "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "verification.json").read_text())
    assert len(res) == 9 and all(r["passed"] for r in res)


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "robust_mflqg.cli", "--version"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
