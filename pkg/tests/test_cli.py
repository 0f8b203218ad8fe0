import json
from pathlib import Path

import pytest

from cmjvolterra.cli import ConfigError, main, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(path, obj):
    path.write_text(json.dumps(obj, indent=2) if not isinstance(obj, str) else obj)
    return path


SMALL = {
    "resolvent": {"experiment": "resolvent", "lifetime": {"kind": "exp", "rate": 1.0},
                  "model": {"lambda_n": 0.5, "offspring": {"1": 1.0}}, "grid": {"T": 2.0, "h": 0.01}},
    "simulate": {"experiment": "simulate", "seed": 4, "lifetime": {"kind": "point", "c": 1.0},
                 "model": {"lambda_n": 0.5, "zeta_n": 0.5, "offspring": {"1": 0.5, "2": 0.5}},
                 "grid": {"T": 2.0, "h": 0.05}, "mc": {"replicas": 200, "block_size": 64},
                 "simulate": {"z0": 5, "record_paths": 1}},
    "cbi": {"experiment": "cbi", "seed": 2, "limit": {"b": 0.5}, "grid": {"T": 1.0, "dt": 0.01},
            "mc": {"replicas": 500}, "cbi": {"eval_times": [0.5, 1.0], "z_list": [1.0]}},
    "converge": {"experiment": "converge", "seed": 1, "lifetime": {"kind": "exp", "rate": 1.0},
                 "limit": {"b": 0.5}, "mc": {"replicas": 200},
                 "converge": {"n_sequence": [10, 20], "eval_times": [1.0], "z_list": [1.0]}},
}


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_shipped_configs_validate(name, capsys):
    assert main(["validate", "--config", str(CONFIGS / name)]) == 0
    assert "valid" in capsys.readouterr().out


def test_resolvent_first_row(tmp_path):
    cfg = write(tmp_path / "c.json", SMALL["resolvent"])
    assert main(["resolvent", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o" / "resolvent.csv").read_text().splitlines()
    assert lines[0] == "t,R,R_left"
    assert float(lines[1].split(",")[1]) == 0.5
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["classification"] == "subcritical"


def test_unknown_key_is_addressed(tmp_path, capsys):
    text = '{\n  "experiment": "resolvent",\n  "lifetime": {"kind": "exp", "rate": 1.0},\n' \
           '  "model": {"lambda_n": 0.5, "offspring": {"1": 1.0}, "lamda": 2}\n}\n'
    cfg = write(tmp_path / "c.json", text)
    assert main(["resolvent", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "line 4" in err and "model" in err and "lamda" in err
    assert not (tmp_path / "o").exists()


def test_malformed_json_reports_line(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        parse_config('{\n "experiment": "cbi",\n "limit": {b: 1}\n}')


def test_semantic_errors_exit_1(tmp_path, capsys):
    bad = dict(SMALL["converge"], limit={"b": 0.5, "c": 0.2})
    cfg = write(tmp_path / "c.json", bad)
    assert main(["validate", "--config", str(cfg)]) == 1
    assert "error" in capsys.readouterr().err


def test_experiment_mismatch(tmp_path):
    cfg = write(tmp_path / "c.json", SMALL["cbi"])
    assert main(["resolvent", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_missing_config_file(tmp_path):
    assert main(["cbi", "--config", str(tmp_path / "nope.json")]) == 1


def test_bad_arguments_exit_1(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["cbi"])
    assert e.value.code == 1
    cfg = write(tmp_path / "c.json", SMALL["cbi"])
    assert main(["cbi", "--config", str(cfg), "--threads", "0"]) == 1


def test_tolerance_failure_exits_2(tmp_path):
    bad = dict(SMALL["converge"], tolerances=[{"kind": "gap", "n": 20, "t": 1.0, "z": 1.0, "se_mult": 0.0}])
    cfg = write(tmp_path / "c.json", bad)
    assert main(["converge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["pass"] is False
    assert summary["checks"][0]["pass"] is False


@pytest.mark.parametrize("command", sorted(SMALL))
def test_manifest_rerun_is_byte_identical(command, tmp_path):
    cfg = write(tmp_path / "c.json", SMALL[command])
    first, second = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(cfg), "--out", str(first), "--threads", "1"]) == 0
    manifest = first / "manifest.json"
    # the manifest is a complete config on its own, and thread count must not matter
    assert main([command, "--config", str(manifest), "--out", str(second), "--threads", "3"]) == 0
    names = sorted(p.name for p in first.iterdir() if p.name != "manifest.json")
    assert names == sorted(p.name for p in second.iterdir() if p.name != "manifest.json")
    assert len(names) >= 2
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_seed_override(tmp_path):
    cfg = write(tmp_path / "c.json", SMALL["cbi"])
    assert main(["cbi", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["cbi", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "99"]) == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 99
    assert (tmp_path / "a" / "laplace.csv").read_bytes() != (tmp_path / "b" / "laplace.csv").read_bytes()


def test_defaults_are_filled_and_pruned():
    cfg = parse_config(json.dumps(SMALL["resolvent"]))
    assert cfg["resolvent"] == {"damped": True}
    assert cfg["seed"] == 0 and cfg["model"]["n"] == 1
    assert "mc" not in cfg and "cbi" not in cfg
    assert parse_config(json.dumps(cfg)) == cfg
    tol = parse_config(json.dumps(dict(SMALL["converge"], tolerances=[{"kind": "moment_ratio"}])))
    assert tol["tolerances"] == [{"kind": "moment_ratio", "moment": "alpha_moment", "max_ratio": 5.0}]
