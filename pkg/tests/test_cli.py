import csv
import json
import subprocess
import sys

import pytest
import yaml
from hypothesis import given, strategies as st

from exitbsde import config as cfgmod
from exitbsde.acceptance import determinism_configs
from exitbsde.cli import main
from exitbsde.config import ConfigError


def write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def run_cmd(tmp_path, doc, out="out", extra=()):
    cfg = write(tmp_path, doc)
    code = main([doc["command"], "-c", cfg, "-o", str(tmp_path / out), *extra])
    return code, tmp_path / out


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="sampling.x0d"):
        cfgmod.parse({"command": "simulate", "sampling": {"x0d": [0.0]}})
    with pytest.raises(ConfigError, match="bogus"):
        cfgmod.parse({"command": "simulate", "bogus": 1})


@pytest.mark.parametrize("doc,field", [
    ({"command": "simulate", "sampling": {"n_paths": 1}}, "sampling.n_paths"),
    ({"command": "simulate", "grid": {"h": 2.0}}, "grid.h"),
    ({"command": "simulate", "refine": {"R": 3}}, "refine.R"),
    ({"command": "simulate", "version": 2}, "version"),
    ({"command": "launch"}, "command"),
    ({"command": "loss-eval", "candidate": {"kind": "file"}}, "candidate.file"),
])
def test_config_field_errors(doc, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        cfgmod.parse(doc)


def test_resolved_yaml_round_trips():
    cfg = cfgmod.parse({"command": "wald", "grid": {"h": 0.03125}})
    again = cfgmod.parse(yaml.safe_load(cfg.to_yaml()))
    assert again.to_dict() == cfg.to_dict()


def test_simulate_outputs(tmp_path):
    doc = {"command": "simulate", "problem": {"name": "P1"}, "grid": {"h": 2.0**-6},
           "sampling": {"n_paths": 1000, "seed": 7, "x0": [0.0]}}
    code, out = run_cmd(tmp_path, doc)
    assert code == 0
    rows = list(csv.reader(open(out / "paths.csv")))
    assert len(rows) == 1001
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_censored"] == 0
    resolved = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert resolved["grid"]["h"] == 2.0**-6 and resolved["refine"]["max_steps"] == 3200
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    code, out = run_cmd(tmp_path, doc, extra=("--threads", "3"))
    assert code == 0 and {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_invalid_start_exit_code(tmp_path, capsys):
    code, _ = run_cmd(tmp_path, {"command": "simulate", "problem": {"name": "P1"},
                                 "sampling": {"n_paths": 10, "x0": [1.5]}})
    assert code == 2
    assert "sampling.x0" in capsys.readouterr().err


def test_missing_candidate_file(tmp_path, capsys):
    code, _ = run_cmd(tmp_path, {"command": "loss-eval", "problem": {"name": "P1"},
                                 "candidate": {"kind": "file", "file": str(tmp_path / "nope.json")}})
    assert code == 2 and "candidate.file" in capsys.readouterr().err


def test_loss_eval_quadratic_cancellation(tmp_path):
    code, out = run_cmd(tmp_path, {"command": "loss-eval", "problem": {"name": "P2"}, "grid": {"h": 2.0**-5},
                                   "sampling": {"n_paths": 300, "seed": 1}})
    assert code == 0
    # per-summand roundoff is ~1e-16, so squares sit far below 1e-24
    assert json.loads((out / "loss_report.json").read_text())["dynamical_mean"] <= 1e-24


def test_loss_eval_unit_vs_zero_rate(tmp_path):
    base = {"command": "loss-eval", "problem": {"name": "P3"}, "grid": {"h": 2.0**-4},
            "candidate": {"kind": "perturbed", "eps": 0.2}, "sampling": {"n_paths": 200, "seed": 2}}
    _, a = run_cmd(tmp_path, base, "a")
    _, b = run_cmd(tmp_path, {**base, "weight": {"type": "exp_exit_clamped", "rate": 0.0, "cap": 2.0}}, "b")
    ja = json.loads((a / "loss_report.json").read_text())
    jb = json.loads((b / "loss_report.json").read_text())
    ja.pop("weight")
    jb.pop("weight")
    assert ja == jb


def test_decompose_check(tmp_path):
    code, out = run_cmd(tmp_path, {"command": "decompose-check", "problem": {"name": "P3"},
                                   "grid": {"h": 2.0**-5}, "candidate": {"kind": "perturbed", "eps": 0.3},
                                   "sampling": {"n_paths": 1200, "seed": 2}})
    assert code == 0
    rep = json.loads((out / "decompose.json").read_text())
    assert rep["n_straddling_steps"] >= 1000 and rep["max_violation"] <= 1e-10


def test_wald_passes(tmp_path):
    code, out = run_cmd(tmp_path, {"command": "wald", "problem": {"name": "P2"}, "grid": {"h": 2.0**-5},
                                   "sampling": {"n_paths": 4000, "seed": 9, "x0": [0.0, 0.0]}})
    assert code == 0 and json.loads((out / "wald.json").read_text())["passed"]


def test_rate_study_failure_exit_code(tmp_path):
    # U = 0 on P1 from x0 = 0: every summand is -h, so the loss is h E[tau_bar], slope ~1 < 1.25 - 0.15
    code, out = run_cmd(tmp_path, {"command": "rate-study", "problem": {"name": "P1"},
                                   "grid": {"h_list": [2.0**-6, 2.0**-7, 2.0**-8]},
                                   "candidate": {"kind": "zero"},
                                   "sampling": {"n_paths": 4000, "seed": 1, "x0": [0.0]}, "study": {"quantity": "dynamical"}})
    assert code == 4
    assert json.loads((out / "rate_summary.json").read_text())["verdict"] == "fail"


def test_rate_study_insufficient_precision(tmp_path):
    code, _ = run_cmd(tmp_path, {"command": "rate-study", "problem": {"name": "P3"},
                                 "grid": {"h_list": [2.0**-3, 2.0**-4, 2.0**-5]},
                                 "sampling": {"n_paths": 3, "seed": 1}, "study": {"quantity": "dynamical"}})
    assert code == 3


def test_validate_and_train(tmp_path):
    code, out = run_cmd(tmp_path, {"command": "validate", "problem": {"name": "P4"}})
    assert code == 0 and json.loads((out / "validation.json").read_text())["passed"]
    code, out = run_cmd(tmp_path, {"command": "train", "problem": {"name": "P1"},
                                   "train": {"iterations": 3, "eval_every": 1, "batch_paths": 16}}, "t")
    assert code == 0
    assert {"checkpoint.json", "net.json", "history.csv", "train_summary.json"} <= {p.name for p in out.iterdir()}


def test_command_mismatch(tmp_path):
    cfg = write(tmp_path, {"command": "wald"})
    assert main(["simulate", "-c", cfg, "-o", str(tmp_path / "x")]) == 2


def test_determinism_configs_parse():
    for doc in determinism_configs("quick").values():
        cfgmod.parse(doc)


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "exitbsde.cli", "validate", "-o", str(tmp_path / "v")],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12))
def test_unknown_top_level_keys(key):
    known = {f for f in cfgmod.ExperimentConfig.__dataclass_fields__}
    if key in known:
        return
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.parse({"command": "simulate", key: 1})


def test_increment_dump_matches_paths(tmp_path):
    code, out = run_cmd(tmp_path, {"command": "simulate", "problem": {"name": "P1"}, "grid": {"h": 2.0**-4},
                                   "sampling": {"n_paths": 20, "seed": 4, "x0": [0.0]},
                                   "output": {"increments": True}})
    assert code == 0
    paths = list(csv.DictReader(open(out / "paths.csv")))
    incs = list(csv.DictReader(open(out / "increments.csv")))
    assert len(incs) == sum(int(p["exit_index"]) for p in paths)
    # P1 is Brownian motion: the exit state is x0 plus the summed increments
    for p in paths:
        total = sum(float(r["dW_0"]) for r in incs if r["path_id"] == p["path_id"])
        assert abs(total - float(p["exit_0"])) <= 1e-12
