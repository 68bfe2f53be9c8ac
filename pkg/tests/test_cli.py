import json

import pytest

from capsrl import cli
from capsrl.cli import (CONFIG_SCHEMA, EXIT_INVARIANT, EXIT_MISSING, EXIT_SCHEMA, EXIT_VIOLATION,
                        build_parser, main)
from capsrl.evaluation import VerifyReport
from conftest import tree_bytes, write_config


def run(tmp_path, command, cfg, *extra):
    path = write_config(tmp_path / f"{command}.json", cfg)
    return main([command, "--config", str(path), *extra])


def test_pipeline_outputs(tmp_path, pipeline):
    out = pipeline(tmp_path / "a")
    for name in ("env.json", "dataset.csv", "artifact/manifest.json", "artifact/policy.ckpt",
                 "eval.csv", "eval_summary.csv", "eval.json", "ablation_heads.csv",
                 "ablation_fqe.csv"):
        assert (out / name).exists(), name
    rows = (out / "eval.csv").read_text().splitlines()
    assert len(rows) == 4


def test_pipeline_rerun_is_byte_identical(tmp_path, pipeline):
    a = tree_bytes(pipeline(tmp_path / "a"))
    b = tree_bytes(pipeline(tmp_path / "b"))
    assert a.keys() == b.keys()
    for k in a:
        assert a[k] == b[k], k


def test_exact_eval_and_overrides(tmp_path, capsys):
    code = run(tmp_path, "eval", {"env": {"kind": "chain3"}, "exact_K": 2,
                                  "eval": {"thresholds": [0.5, 1.0], "mode": "exact"}},
               "--out", str(tmp_path / "o"), "--seed", "3")
    assert code == 0
    assert "2/2 thresholds safe" in capsys.readouterr().out
    assert (tmp_path / "o" / "eval.csv").exists()


def test_verify_command(tmp_path):
    assert run(tmp_path, "verify", {"out": str(tmp_path / "v"), "fuzz": {"n_instances": 5}}) == 0
    rec = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rec["passed"] and rec["n_instances"] == 5


def test_sweep_command(tmp_path):
    cfg = {"out": str(tmp_path / "s"),
           "suite": {"envs": [{"kind": "chain3"}], "algos": ["exact"], "n_episodes": 40,
                     "train": {"steps": 20, "hidden": [8]},
                     "threshold_sets": {"low": [0.5, 1.0]}}}
    assert run(tmp_path, "sweep", cfg) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "threshold_set,method,n_safe,n_total"
    assert "low,caps-exact,1,1" in lines


@pytest.mark.parametrize("cfg", [
    {"env": {"kind": "chain3"}, "bogus": 1},
    {"env": {"kind": "gridworld3", "slip_prob": "high"}},
    {"env": {"kind": "moon"}},
    {"env": {"kind": "chain3", "extra": 1}},
    {"seed": -1, "env": {"kind": "chain3"}},
])
def test_schema_errors(tmp_path, capsys, cfg):
    assert run(tmp_path, "env-gen", cfg) == EXIT_SCHEMA
    assert "config error at" in capsys.readouterr().err


def test_missing_required_group(tmp_path):
    assert run(tmp_path, "eval", {"env": {"kind": "chain3"}}) == EXIT_SCHEMA
    assert run(tmp_path, "train", {}) == EXIT_SCHEMA


def test_invalid_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["verify", "--config", str(p)]) == EXIT_SCHEMA


def test_missing_inputs(tmp_path):
    assert main(["verify", "--config", str(tmp_path / "nope.json")]) == EXIT_MISSING
    assert run(tmp_path, "train", {"dataset_file": str(tmp_path / "none.csv")}) == EXIT_MISSING
    assert run(tmp_path, "eval", {"env": {"kind": "chain3"},
                                  "artifact_dir": str(tmp_path / "none")}) == EXIT_MISSING
    assert run(tmp_path, "dataset-gen", {"env_file": str(tmp_path / "e.json")}) == EXIT_MISSING


def test_invariant_breach(tmp_path):
    cfg = {"out": str(tmp_path / "o"),
           "env": {"kind": "gridworld", "width": 2, "height": 2, "hazards": [[5, 5]],
                   "goal": [1, 1], "slip_prob": 0.0, "horizon": 3}}
    assert run(tmp_path, "env-gen", cfg) == EXIT_INVARIANT


def test_artifact_shape_mismatch(tmp_path, pipeline):
    out = pipeline(tmp_path / "p")
    cfg = {"out": str(tmp_path / "o"), "env": {"kind": "chain3"},
           "artifact_dir": str(out / "artifact")}
    assert run(tmp_path, "eval", cfg) == EXIT_INVARIANT


def test_verify_violation_exit_code(tmp_path, monkeypatch, capsys):
    bad = VerifyReport(1, 1, 0, 0.5, [{"env": "x"}], 0.0)
    monkeypatch.setattr(cli, "fuzz_verify", lambda spec, seed, workers: bad)
    assert run(tmp_path, "verify", {"out": str(tmp_path / "v")}) == EXIT_VIOLATION
    assert "verify: FAIL" in capsys.readouterr().out
    assert not json.loads((tmp_path / "v" / "verify.json").read_text())["passed"]


def test_parser_and_schema():
    parser = build_parser()
    args = parser.parse_args(["train", "--config", "x.json", "--workers", "2"])
    assert args.command == "train" and args.workers == 2
    with pytest.raises(SystemExit):
        parser.parse_args(["fly", "--config", "x.json"])
    assert CONFIG_SCHEMA["additionalProperties"] is False
