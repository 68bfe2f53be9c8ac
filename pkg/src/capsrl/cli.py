"""Command-line entry point.

Every command reads one JSON config file, validates it against
:data:`CONFIG_SCHEMA` (unknown keys are rejected), writes its outputs
atomically under ``--out`` and prints a one-line summary.

Exit codes:

* 0 - success
* 1 - ``verify`` found an inadmissible policy or a bound violation
* 2 - config does not match the schema
* 3 - a referenced input file is missing
* 4 - internal invariant breach (invalid instance, inconsistent inputs)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema

from .cmdp import InvalidSpecError, dumps, load_cmdp, make_env, save_cmdp, validate
from .dataset import BehaviorSpec, DatasetError, generate_dataset, load_dataset, save_dataset
from .evaluation import (ABLATIONS, EvalConfig, FuzzSpec, SuiteConfig, evaluate, fuzz_verify,
                         run_ablation, write_ablation, write_eval)
from .io import atomic_write_text
from .oracle import solve
from .trainers import ALGOS, TrainConfig, load_artifacts, oracle_artifacts, save_artifacts, train

log = logging.getLogger("capsrl")

EXIT_OK, EXIT_VIOLATION, EXIT_SCHEMA, EXIT_MISSING, EXIT_INVARIANT = 0, 1, 2, 3, 4

# ---------------------------------------------------------------------------
# schema


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}

_PAIR = {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2}
_ENV_KINDS = {
    "chain3": ({}, []),
    "gridworld3": ({"slip_prob": _NUM, "horizon": _POS_INT}, []),
    "gridworld": ({"width": _POS_INT, "height": _POS_INT, "hazards": {"type": "array",
                                                                      "items": _PAIR},
                   "goal": _PAIR, "start": _PAIR, "slip_prob": _NUM, "horizon": _POS_INT,
                   "name": {"type": "string"}},
                  ["width", "height", "hazards", "goal", "slip_prob", "horizon"]),
    "random": ({"n_states": _POS_INT, "n_actions": _POS_INT, "horizon": _POS_INT,
                "branching": _POS_INT, "cost_max": {"type": "integer", "minimum": 0},
                "seed": _SEED},
               ["n_states", "n_actions", "horizon", "branching", "cost_max", "seed"]),
    "file": ({"path": {"type": "string"}}, ["path"]),
}
ENV_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": list(_ENV_KINDS)}},
    "allOf": [
        {"if": {"properties": {"kind": {"const": kind}}},
         "then": _obj({"kind": {"const": kind}, **props}, ["kind", *req])}
        for kind, (props, req) in _ENV_KINDS.items()
    ],
}

BEHAVIOR_SCHEMA = _obj({"weight_reward_greedy": _NUM, "weight_cost_greedy": _NUM,
                        "weight_uniform": _NUM, "epsilon_explore": _NUM})

TRAIN_SCHEMA = _obj({
    "algo": {"enum": list(ALGOS)}, "K": {"type": "integer", "minimum": 2}, "steps": _POS_INT,
    "batch_size": _POS_INT, "lr_actor": _NUM, "lr_critic": _NUM, "gamma": _NUM, "beta": _NUM,
    "expectile_tau": _NUM, "alpha": _NUM, "bc_weight": _NUM, "seed": _SEED,
    "shared_backbone": {"type": "boolean"},
    "hidden": {"type": "array", "items": _POS_INT, "minItems": 1},
    "weight_clip": _NUM, "actor_steps": {"type": ["integer", "null"], "minimum": 1},
    "fqe_sweeps": _POS_INT, "fqe_steps_per_sweep": _POS_INT, "critic_lr_final": _NUM,
})

EVAL_SCHEMA = _obj({
    "thresholds": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                   "minItems": 1},
    "seeds": {"type": "array", "items": _SEED},
    "episodes_per_seed": _POS_INT,
    "mode": {"enum": ["monte_carlo", "exact"]},
})

SUITE_SCHEMA = _obj({
    "envs": {"type": "array", "items": ENV_SCHEMA, "minItems": 1},
    "algos": {"type": "array", "items": {"enum": list(ALGOS) + ["exact"]}, "minItems": 1},
    "n_episodes": _POS_INT,
    "behavior": BEHAVIOR_SCHEMA,
    "dataset_seed": _SEED,
    "train": TRAIN_SCHEMA,
    "eval": EVAL_SCHEMA,
    "heads": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
    "threshold_sets": {"type": "object", "additionalProperties": EVAL_SCHEMA["properties"]
                       ["thresholds"], "minProperties": 1},
})

FUZZ_SCHEMA = _obj({
    "n_instances": _POS_INT, "max_states": _POS_INT, "max_actions": _POS_INT,
    "max_horizon": _POS_INT, "max_cost": {"type": "integer", "minimum": 0},
    "heads": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
    "deterministic": {"type": "boolean"},
})

CONFIG_SCHEMA = _obj({
    "seed": _SEED,
    "out": {"type": "string"},
    "workers": _POS_INT,
    "env": ENV_SCHEMA,
    "env_file": {"type": "string"},
    "dataset": _obj({"n_episodes": _POS_INT, "behavior": BEHAVIOR_SCHEMA}),
    "dataset_file": {"type": "string"},
    "train": TRAIN_SCHEMA,
    "artifact_dir": {"type": "string"},
    "exact_K": {"type": "integer", "minimum": 2},
    "eval": EVAL_SCHEMA,
    "suite": SUITE_SCHEMA,
    "ablations": {"type": "array", "items": {"enum": list(ABLATIONS)}, "minItems": 1},
    "fuzz": FUZZ_SCHEMA,
})

REQUIRED = {
    "env-gen": ["env"],
    "dataset-gen": [["env", "env_file"]],
    "train": ["dataset_file"],
    "eval": [["env", "env_file"], ["artifact_dir", "exact_K"]],
    "sweep": ["suite"],
    "ablate": ["suite"],
    "verify": [],
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _schema_error(e: jsonschema.ValidationError) -> CliError:
    path = "/".join(str(p) for p in e.absolute_path) or "<root>"
    return CliError(EXIT_SCHEMA, f"config error at {path}: {e.message}")


def load_config(path, command: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CliError(EXIT_SCHEMA, f"config error at <root>: invalid JSON ({e})") from None
    check_config(cfg, command)
    return cfg


def check_config(cfg: dict, command: str) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = list(validator.iter_errors(cfg))
    if errors:
        # report the most specific error first
        best = jsonschema.exceptions.best_match(errors)
        raise _schema_error(best)
    for need in REQUIRED[command]:
        options = need if isinstance(need, list) else [need]
        if not any(k in cfg for k in options):
            raise CliError(EXIT_SCHEMA, f"config error at <root>: {command} needs "
                           f"{' or '.join(repr(k) for k in options)}")


# ---------------------------------------------------------------------------
# helpers


def _need_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"input not found: {p}")
    return p


def _env(cfg: dict):
    if "env_file" in cfg:
        return load_cmdp(_need_file(cfg["env_file"]))
    spec = cfg["env"]
    if spec.get("kind") == "file":
        _need_file(spec["path"])
    return make_env(spec)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    rec = dict(cfg.get("train", {}))
    rec.setdefault("seed", seed)
    if "hidden" in rec:
        rec["hidden"] = tuple(rec["hidden"])
    return TrainConfig.for_algo(rec.pop("algo", "iql"), **rec)


def _eval_config(cfg: dict) -> EvalConfig:
    rec = dict(cfg.get("eval", {}))
    return EvalConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in rec.items()})


def _suite(cfg: dict, seed: int) -> SuiteConfig:
    rec = dict(cfg["suite"])
    rec.setdefault("dataset_seed", seed)
    train_rec = dict(rec.get("train", {}))
    train_rec.setdefault("seed", seed)
    rec["train"] = train_rec
    return SuiteConfig.from_record(rec)


# ---------------------------------------------------------------------------
# commands


def cmd_env_gen(cfg: dict, out: Path, seed: int, workers: int) -> str:
    cmdp = make_env(cfg["env"])
    bad = validate(cmdp)
    if bad:
        raise CliError(EXIT_INVARIANT, f"invalid instance: {bad[0]}")
    save_cmdp(cmdp, out / "env.json")
    return f"env-gen: {cmdp.name} S={cmdp.n_states} A={cmdp.n_actions} T={cmdp.horizon} -> {out / 'env.json'}"


def cmd_dataset_gen(cfg: dict, out: Path, seed: int, workers: int) -> str:
    cmdp = _env(cfg)
    d = cfg.get("dataset", {})
    behavior = BehaviorSpec(**d.get("behavior", {}))
    ds = generate_dataset(cmdp, behavior, d.get("n_episodes", 1000), seed, solve(cmdp))
    save_dataset(ds, out / "dataset.csv")
    return (f"dataset-gen: {len(ds)} transitions, {ds.n_episodes} episodes, "
            f"coverage {ds.stats.coverage:.3f} -> {out / 'dataset.csv'}")


def cmd_train(cfg: dict, out: Path, seed: int, workers: int) -> str:
    ds = load_dataset(_need_file(cfg["dataset_file"]))
    tc = _train_config(cfg, seed)
    art = train(ds, tc)
    save_artifacts(art, out / "artifact")
    return (f"train: {tc.algo} K={tc.K} critic runs={art.counters['critic_runs']} "
            f"-> {out / 'artifact'}")


def cmd_eval(cfg: dict, out: Path, seed: int, workers: int) -> str:
    cmdp = _env(cfg)
    ec = _eval_config(cfg)
    vt = solve(cmdp)
    if "artifact_dir" in cfg:
        _need_file(Path(cfg["artifact_dir"]) / "manifest.json")
        art = load_artifacts(cfg["artifact_dir"])
        if (art.n_states, art.n_actions, art.horizon) != (cmdp.n_states, cmdp.n_actions,
                                                          cmdp.horizon):
            raise CliError(EXIT_INVARIANT, "artifact does not match the environment's shape")
    else:
        art = oracle_artifacts(cmdp, cfg["exact_K"], vt)
    rep = evaluate(art, cmdp, ec, vt=vt, workers=workers)
    write_eval([rep], out)
    return (f"eval: {rep.method} on {cmdp.name}, {rep.n_safe}/{len(rep.results)} thresholds safe, "
            f"mean norm cost {rep.mean_normalized_cost:.3f} -> {out / 'eval.csv'}")


def cmd_sweep(cfg: dict, out: Path, seed: int, workers: int) -> str:
    rep = run_ablation("thresholds", _suite(cfg, seed), workers)
    atomic_write_text(out / "sweep.csv", rep.csv())
    atomic_write_text(out / "sweep.json", dumps(rep.to_record()) + "\n")
    cells = ", ".join(f"{r['method']}@{r['threshold_set']}={r['n_safe']}/{r['n_total']}"
                      for r in rep.rows)
    return f"sweep: {cells} -> {out / 'sweep.csv'}"


def cmd_ablate(cfg: dict, out: Path, seed: int, workers: int) -> str:
    suite = _suite(cfg, seed)
    kinds = cfg.get("ablations", ["heads", "sharing", "fqe"])
    notes = []
    for kind in kinds:
        rep = run_ablation(kind, suite, workers)
        write_ablation(rep, out)
        n_pass = sum(o["status"] == "pass" for o in rep.observations)
        notes.append(f"{kind} ({len(rep.rows)} rows, {n_pass}/{len(rep.observations)} findings hold)")
    return f"ablate: {'; '.join(notes)} -> {out}"


def cmd_verify(cfg: dict, out: Path, seed: int, workers: int) -> str:
    spec = FuzzSpec(**cfg.get("fuzz", {}))
    t0 = time.perf_counter()
    rep = fuzz_verify(spec, seed, workers)
    atomic_write_text(out / "verify.json", dumps(rep.to_record()) + "\n")
    status = "PASS" if rep.passed else "FAIL"
    msg = (f"verify: {status} {rep.n_instances} instances, {rep.n_cases} cases, "
           f"max violation {rep.max_violation:.3g}, {len(rep.failures)} failures "
           f"({time.perf_counter() - t0:.1f}s) -> {out / 'verify.json'}")
    if not rep.passed:
        raise CliError(EXIT_VIOLATION, msg)
    return msg


COMMANDS = {
    "env-gen": cmd_env_gen,
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsrl", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 0 ok, 1 verify violation, 2 schema, "
                                            "3 missing input, 4 invariant breach")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
        p.add_argument("--workers", type=int, help="worker threads (overrides config 'workers')")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("CAPS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        overrides = {k: v for k, v in (("seed", args.seed), ("out", args.out),
                                       ("workers", args.workers)) if v is not None}
        if overrides:
            cfg = {**cfg, **overrides}
            check_config(cfg, args.command)
        out = Path(cfg.get("out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        summary = COMMANDS[args.command](cfg, out, int(cfg.get("seed", 0)),
                                         int(cfg.get("workers", 1)))
    except CliError as e:
        print(str(e), file=sys.stderr if e.code != EXIT_VIOLATION else sys.stdout)
        return e.code
    except FileNotFoundError as e:
        print(f"input not found: {e.filename}", file=sys.stderr)
        return EXIT_MISSING
    except (InvalidSpecError, DatasetError, ValueError) as e:
        print(f"invariant breach: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
