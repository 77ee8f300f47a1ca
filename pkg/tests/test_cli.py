import csv
import json
import subprocess
import sys

import pytest

from mepackets import acceptance, cli


def run(tmp_path, *argv, sub="out"):
    out = tmp_path / sub
    return cli.run([*argv, "--out", str(out), "--quiet"]), out


def read_csv(path):
    with open(path, newline="") as fh:
        comment = fh.readline()
        rows = list(csv.reader(fh))
    return comment, rows[0], rows[1:]


FAST = {
    "me-classical": ["--t-max", "2", "--n-times", "5"],
    "me-quantum": ["--t-max", "2", "--n-times", "5", "--nu", "2"],
    "compare": ["--t-max", "2", "--n-times", "5", "--nu", "1.5", "--matrix"],
    "rod": ["--n-scan", "10:40:x2"],
    "jointmeas": ["--cells", "16", "--points", "256"],
    "register": ["--draws", "2000"],
    "tracks": ["--tracks", "200", "--layers", "4"],
}


@pytest.mark.parametrize("cmd", sorted(FAST))
def test_subcommands_write_header_and_json(tmp_path, cmd):
    code, out = run(tmp_path, cmd, *FAST[cmd], "--seed", "3")
    assert code == cli.EXIT_OK
    comment, header, rows = read_csv(out / f"{cmd}.csv")
    assert comment.startswith("# mepackets ") and "seed=3" in comment and "config_sha256=" in comment
    assert rows and all(len(r) == len(header) for r in rows)
    summary = json.loads((out / f"{cmd}.json").read_text())
    assert summary["command"] == cmd and summary["seed"] == 3


@pytest.mark.parametrize("cmd", ["me-classical", "register", "tracks"])
def test_same_seed_gives_identical_bytes(tmp_path, cmd):
    extra = ["--method", "mc", "--samples", "2000"] if cmd == "me-classical" else []
    a = run(tmp_path, cmd, *FAST[cmd], *extra, "--seed", "7", sub="a")[1] / f"{cmd}.csv"
    b = run(tmp_path, cmd, *FAST[cmd], *extra, "--seed", "7", sub="b")[1] / f"{cmd}.csv"
    c = run(tmp_path, cmd, *FAST[cmd], *extra, "--seed", "8", sub="c")[1] / f"{cmd}.csv"
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_compare_columns_agree(tmp_path):
    code, out = run(tmp_path, "compare", *FAST["compare"])
    _, header, rows = read_csv(out / "compare.csv")
    assert header == ["t", "Q_classical", "P_classical", "dQ_classical", "dP_classical",
                      "Q_quantum", "P_quantum", "dQ_quantum", "dP_quantum",
                      "Q_matrix", "P_matrix", "dQ_matrix", "dP_matrix", "max_abs_diff"]
    assert max(float(r[-1]) for r in rows) < 1e-8


def test_rod_scan_example(tmp_path):
    code, out = run(tmp_path, "rod", "--n-scan", "100:12800:x2")
    _, header, rows = read_csv(out / "rod.csv")
    assert header == ["N", "mean_L", "rel_dL", "sqrtN_rel"]
    assert [int(r[0]) for r in rows] == [100 * 2 ** k for k in range(8)]
    assert json.loads((out / "rod.json").read_text())["slope"] == pytest.approx(-0.5, abs=0.02)


def test_rod_energy_mode_columns(tmp_path):
    code, out = run(tmp_path, "rod", "--n-scan", "10:20:+10", "--energy", "2.0")
    assert code == 0
    assert read_csv(out / "rod.csv")[1] == ["N", "lambda", "mean_L", "rel_dL", "sqrtN_rel"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n-scan": "10:40:x2", "xi": 2.0}))
    code, out = run(tmp_path, "rod", "--config", str(cfg), "--xi", "3.0")
    assert code == 0
    s = json.loads((out / "rod.json").read_text())
    assert s["config"]["n_scan"] == "10:40:x2" and s["config"]["xi"] == 3.0
    _, _, rows = read_csv(out / "rod.csv")
    assert [int(r[0]) for r in rows] == [10, 20, 40]
    assert float(rows[0][1]) == 9 * 3.0


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_option": 1}))
    assert run(tmp_path, "rod", "--config", str(bad))[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "rod", "--config", str(tmp_path / "missing.json"))[0] == cli.EXIT_CONFIG


def test_env_out_directory(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ENV_OUT, str(tmp_path / "env"))
    assert cli.run(["rod", "--n-scan", "10:20:x2", "--quiet"]) == 0
    assert (tmp_path / "env" / "rod.csv").exists()


@pytest.mark.parametrize("argv", [
    ["rod", "--n-scan", "1:4:+1"],
    ["rod", "--n-scan", "10:5"],
    ["compare", "--potential", "poly", "--coeffs", "0,0,0,1"],
    ["verify", "--suite", "12"],
    ["rod", "--bogus"],
    ["me-classical", "--n-times", "1"],
])
def test_configuration_errors_exit_2(tmp_path, argv):
    assert run(tmp_path, *argv)[0] == cli.EXIT_CONFIG


def test_numerical_diagnostic_exit_3(tmp_path):
    # inverted quartic: sampled trajectories blow up in finite time
    code, _ = run(tmp_path, "me-classical", "--method", "mc", "--potential", "poly",
                  "--coeffs", "0,0,0,0,-1", "--t-max", "20", "--n-times", "2", "--samples", "1000")
    assert code == cli.EXIT_NUMERIC


def test_verify_failure_exit_1(tmp_path, monkeypatch):
    def failing(seed):
        return acceptance.CheckResult(1, "stub", False, "forced")
    monkeypatch.setattr(acceptance, "CHECKS", (failing,))
    code, out = run(tmp_path, "verify")
    assert code == cli.EXIT_FAILED
    assert json.loads((out / "verify.json").read_text())["passed"] is False


def test_verify_subset(tmp_path):
    code, out = run(tmp_path, "verify", "--suite", "3,5")
    assert code == 0
    assert [c["number"] for c in json.loads((out / "verify.json").read_text())["checks"]] == [3, 5]


def test_parse_scan():
    assert cli.parse_scan("100:800:x2") == [100, 200, 400, 800]
    assert cli.parse_scan("10:30:+10") == [10, 20, 30]
    with pytest.raises(cli.ConfigError):
        cli.parse_scan("10:30:x1")


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mepackets", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("mepackets ")
