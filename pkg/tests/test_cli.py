import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from nlstop.cli import main
from nlstop.config import load_config, resolve
from nlstop.errors import InvalidInput

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, obj, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(obj))
    return str(path)


def error_code(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"]["code"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


MINIMAL = {
    "grid": {"steps": 1, "horizon": 1.0, "intensity": 0.5},
    "driver": {"name": "zero"},
    "obstacle": {"table": {"constant": 0.7}},
}


def test_minimal_solve(tmp_path):
    out = tmp_path / "out"
    assert main(["solve", "--config", write(tmp_path, MINIMAL), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["y0"] == 0.7
    rows = read_csv(out / "rbsde.csv")
    assert [r["node_id"] for r in rows] == ["0:main:", "0:post:", "1:main:0", "1:main:1", "1:main:2", "1:main:3"]
    assert list(rows[0]) == ["node_id", "t", "phase", "xi", "y", "z", "kappa", "dA", "dC",
                             "dh_0", "dh_1", "dh_2", "dh_3"]


def test_grid_invalid(tmp_path, capsys):
    cfg = {**MINIMAL, "grid": {"steps": 1, "horizon": 1.0, "intensity": 1.5}}
    assert main(["solve", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "GRID_INVALID"


def test_no_contraction(tmp_path, capsys):
    cfg = {**MINIMAL, "driver": {"name": "linear", "r": 2.0}}
    assert main(["solve", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "NO_CONTRACTION"


def test_oracle_batch(tmp_path):
    cfg = {"grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5},
           "obstacle": {"generator": {"shape": "mixed", "count": 50, "seed": 42}}}
    out = tmp_path / "o"
    assert main(["oracle", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "oracle_batch.csv")
    assert len(rows) == 50
    assert max(float(r["gap"]) for r in rows) <= 1e-10
    assert {r["shape"] for r in rows} == {"uniform", "rusc", "regular"}


def test_oracle_single_instance_lists_rules(tmp_path):
    cfg = {**MINIMAL, "grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5},
           "driver": {"name": "linear", "r": 0.1, "z_coef": 0.2}}
    out = tmp_path / "o"
    assert main(["oracle", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "oracle_rules.csv")
    assert len(rows) == 83
    assert list(rows[0]) == ["rule_id", "rule_description", "value_at_root"]


def test_oracle_too_deep(tmp_path, capsys):
    cfg = {"grid": {"steps": 5, "horizon": 1.0, "intensity": 0.5},
           "obstacle": {"generator": {"count": 1, "seed": 1}}}
    assert main(["oracle", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "ORACLE_TOO_LARGE"


def test_oracle_fault_injection(tmp_path, capsys):
    cfg = {"grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5},
           "obstacle": {"generator": {"count": 6, "seed": 3}},
           "oracle": {"fault_injection": {"index": 4, "offset": 1e-6}}}
    out = tmp_path / "o"
    assert main(["oracle", "--config", write(tmp_path, cfg), "--out", str(out)]) == 1
    assert error_code(capsys) == "VERIFICATION_FAILED"
    rows = read_csv(out / "oracle_batch.csv")
    assert [r["index"] for r in rows if float(r["gap"]) > 1e-10] == ["4"]


def test_generator_needs_seed(tmp_path, capsys):
    cfg = {"grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5}, "obstacle": {"generator": {"count": 2}}}
    assert main(["oracle", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "CONFIG_INVALID"
    assert main(["oracle", "--config", write(tmp_path, cfg), "--seed", "5", "--out", str(tmp_path / "o")]) == 0


MARKET = {"r": 0.0, "mu": [0.0, 0.0], "sigma": [0.2, 0.1], "beta_jump": [0.1, -0.2]}


def test_price_always_in_the_money(tmp_path):
    cfg = {"grid": {"steps": 3, "horizon": 1.0, "intensity": 0.5}, "market": MARKET,
           "obstacle": {"payoff": {"kind": "digital_call", "strike": 0.0}}}
    out = tmp_path / "o"
    assert main(["price", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "pricing_summary.json").read_text())
    assert summary["u0"] == 1.0
    rows = read_csv(out / "pricing.csv")
    assert list(rows[0])[-5:] == ["s1", "s2", "phi1", "phi2", "wealth"]


def test_price_digital_matches_oracle(tmp_path):
    cfg = {"grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5},
           "market": {**MARKET, "r": 0.02, "mu": [0.05, 0.03]},
           "obstacle": {"payoff": {"kind": "digital_call", "strike": 1.1}}}
    out = tmp_path / "o"
    assert main(["price", "--config", write(tmp_path, cfg), "--out", str(out)]) == 0
    summary = json.loads((out / "pricing_summary.json").read_text())
    assert summary["oracle_gap"] <= 1e-10
    assert summary["shortfall"] <= summary["shortfall_bound"]


def test_price_refinement_reports_sequence(tmp_path):
    out = tmp_path / "o"
    code = main(["price", "--config", str(CONFIGS / "price_digital.yaml"), "--out", str(out)])
    summary = json.loads((out / "pricing_summary.json").read_text())
    assert [r["steps"] for r in summary["refinement"]] == [2, 4, 8]
    # the exit code follows the nonincreasing-shortfall requirement
    shortfalls = [r["shortfall"] for r in summary["refinement"]]
    monotone = all(b <= a for a, b in zip(shortfalls, shortfalls[1:]))
    assert code == (0 if monotone else 1)


def test_verify_single_suite_emits_histogram(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = {"checks": {"estimates": {"count": 10}}}
    assert main(["verify", "--config", write(tmp_path, cfg), "--seed", "42", "--out", str(out)]) == 0
    summary = json.loads((out / "verify_summary.json").read_text())
    (suite,) = summary["suites"]
    assert "slack_histogram" in suite["metrics"]
    assert "estimates: pass" in capsys.readouterr().out


def test_verify_check_flag(tmp_path):
    out = tmp_path / "o"
    assert main(["verify", "--seed", "1", "--check", "comparison", "--check", "refop", "--out", str(out)]) == 0
    summary = json.loads((out / "verify_summary.json").read_text())
    assert [s["name"] for s in summary["suites"]] == ["comparison", "refop"]


def test_unknown_check(tmp_path, capsys):
    assert main(["verify", "--seed", "42", "--check", "nosuch", "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "UNKNOWN_CHECK"


def test_summary_round_trips_as_config(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", str(CONFIGS / "solve_table.yaml"), "--out", str(first)]) == 0
    assert main(["solve", "--config", str(first / "summary.json"), "--out", str(second)]) == 0
    for name in ("rbsde.csv", "summary.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_format_selection(tmp_path):
    out = tmp_path / "o"
    assert main(["solve", "--config", write(tmp_path, MINIMAL), "--out", str(out), "--format", "json"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["summary.json"]


def test_parallel_flag_does_not_change_bytes(tmp_path):
    cfg = write(tmp_path, {"grid": {"steps": 2, "horizon": 1.0, "intensity": 0.4},
                           "obstacle": {"generator": {"count": 12, "seed": 9}}})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["oracle", "--config", cfg, "--out", str(a), "--parallel", "on"]) == 0
    assert main(["oracle", "--config", cfg, "--out", str(b), "--parallel", "off"]) == 0
    for name in ("oracle_batch.csv", "oracle_summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "nlstop", "solve", "--config", write(tmp_path, MINIMAL), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr


def test_config_numbers_and_errors(tmp_path):
    cfg = resolve({**MINIMAL, "driver": {"name": "linear", "r": "1e-1"}})
    assert cfg.driver["r"] == 0.1
    with pytest.raises(InvalidInput):
        resolve({**MINIMAL, "bogus": {}})
    with pytest.raises(InvalidInput):
        resolve({**MINIMAL, "obstacle": {"table": {"constant": 1}, "payoff": {"kind": "put"}}})
    with pytest.raises(InvalidInput):
        resolve({**MINIMAL, "grid": {"steps": 1.5, "intensity": 0.5}})
    with pytest.raises(InvalidInput):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: [unclosed")
    with pytest.raises(InvalidInput):
        load_config(bad)


def test_table_layer_shapes_are_checked(tmp_path, capsys):
    cfg = {**MINIMAL, "grid": {"steps": 2, "horizon": 1.0, "intensity": 0.5},
           "obstacle": {"table": {"main": [[0.0], [0.0, 0.0, 0.0, 0.0], [0.0] * 15]}}}
    assert main(["solve", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert error_code(capsys) == "CONFIG_INVALID"
