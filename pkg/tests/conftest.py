import json
from pathlib import Path

import pytest

from capsrl.cli import main

PIPELINE_ENV = {"kind": "gridworld3", "slip_prob": 0.1}
PIPELINE_TRAIN = {"algo": "iql", "K": 4, "steps": 60, "batch_size": 64, "hidden": [16, 16],
                  "gamma": 1.0}


def write_config(path: Path, cfg: dict) -> Path:
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def run_pipeline(root: Path, seed: int = 7) -> Path:
    """env-gen -> dataset-gen -> train -> eval -> ablate, all through the CLI."""
    root.mkdir(parents=True, exist_ok=True)
    out = root / "out"
    steps = [
        ("env-gen", {"env": PIPELINE_ENV}),
        ("dataset-gen", {"env_file": str(out / "env.json"),
                         "dataset": {"n_episodes": 80}}),
        ("train", {"dataset_file": str(out / "dataset.csv"), "train": PIPELINE_TRAIN}),
        ("eval", {"env_file": str(out / "env.json"), "artifact_dir": str(out / "artifact"),
                  "eval": {"thresholds": [1, 2, 4], "seeds": [0, 1], "episodes_per_seed": 10}}),
        ("ablate", {"suite": {"envs": [{"kind": "chain3"}], "algos": ["iql"],
                              "n_episodes": 60, "heads": [2, 4],
                              "train": {"steps": 30, "batch_size": 32, "hidden": [8],
                                        "fqe_sweeps": 2, "fqe_steps_per_sweep": 10}},
                    "ablations": ["heads", "fqe"]}),
    ]
    for i, (cmd, cfg) in enumerate(steps):
        path = write_config(root / f"{i}_{cmd}.json", {"seed": seed, "out": str(out), **cfg})
        assert main([cmd, "--config", str(path)]) == 0, cmd
    return out


def tree_bytes(directory: Path) -> dict:
    return {str(p.relative_to(directory)): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture
def pipeline():
    return run_pipeline


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
