"""Evaluation harness: exact and Monte Carlo evaluation, threshold sweeps, ablations.

Metrics follow the usual offline safe-RL convention: normalized cost is the
expected episode cost divided by the threshold (safe iff <= 1) and normalized
reward is the expected return min-max scaled between the worst and best
achievable returns from the initial distribution.

Episode cost always includes the cost of the terminal state, in both modes.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .caps import CapsPolicy, caps_policy, caps_policy_fqe_variant
from .cmdp import Cmdp, RngSeed, dumps, fmt_real, make_env, make_random_cmdp, simulate_table
from .dataset import BehaviorSpec, generate_dataset
from .io import atomic_write_text
from .oracle import (ValueTables, evaluate_policy_cost, evaluate_policy_reward, policy_table,
                     reward_range, solve, verify_theorem_bound)
from .trainers import (TrainConfig, TrainedArtifacts, fqe, oracle_artifacts, train, train_bc)

log = logging.getLogger(__name__)

MODES = ("monte_carlo", "exact")
SAFE_TOL = 1e-9


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = (10.0, 20.0, 40.0)
    seeds: tuple[int, ...] = (0, 10, 20)
    episodes_per_seed: int = 20
    mode: str = "monte_carlo"

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(k) for k in self.thresholds))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.thresholds or min(self.thresholds) <= 0:
            raise ValueError(f"thresholds must be nonempty and positive, got {self.thresholds}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "monte_carlo":
            if self.episodes_per_seed < 1:
                raise ValueError("episodes_per_seed must be >= 1 in monte_carlo mode")
            if not self.seeds:
                raise ValueError("monte_carlo mode needs at least one seed")

    def to_record(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["seeds"] = list(self.seeds)
        return d


def normalize(raw_reward: float, raw_cost: float, kappa: float, r_min: float,
              r_max: float) -> tuple[float, float]:
    if not r_max > r_min:
        raise ValueError(f"degenerate reward range [{r_min}, {r_max}]")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    return (raw_reward - r_min) / (r_max - r_min), raw_cost / kappa


# ---------------------------------------------------------------------------
# methods: anything that yields a cost-aware policy for a threshold


@dataclass(eq=False)
class Method:
    """A named policy family ``kappa -> policy(s, t, b)``."""

    name: str
    build: Callable[[float], object]
    algo: str = ""
    K: int = 1
    shared: bool | None = None
    digest: str = ""


def as_method(obj, name: str | None = None) -> Method:
    if isinstance(obj, Method):
        return obj
    if isinstance(obj, TrainedArtifacts):
        default = "caps-exact" if obj.source == "oracle-exact" else f"caps-{obj.config.algo}"
        return Method(name or default, lambda k: caps_policy(obj, k),
                      obj.config.algo, obj.K, obj.config.shared_backbone, obj.digest())
    if hasattr(obj, "tables"):
        return Method(name or "caps", lambda k: caps_policy(obj, k), "", 2)
    if callable(obj):
        label = name or getattr(obj, "label", "policy")
        return Method(label, lambda k: obj, label, 1)
    raise TypeError(f"cannot evaluate {type(obj).__name__}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class ThresholdResult:
    kappa: float
    normalized_reward: float
    normalized_cost: float
    raw_reward: float
    raw_cost: float
    reward_se: float
    cost_se: float
    safe: bool
    fallback_rate: float
    head_frequencies: list[float]
    feasible: bool  # cost-optimal behavior meets kappa from every start state

    def to_record(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    env: str
    method: str
    algo: str
    K: int
    shared: bool | None
    mode: str
    n_seeds: int
    results: list[ThresholdResult]
    r_min: float
    r_max: float
    provenance: dict = field(default_factory=dict)

    @property
    def n_safe(self) -> int:
        return sum(r.safe for r in self.results)

    @property
    def mean_normalized_reward(self) -> float:
        return float(np.mean([r.normalized_reward for r in self.results]))

    @property
    def mean_normalized_cost(self) -> float:
        return float(np.mean([r.normalized_cost for r in self.results]))

    @property
    def safe_on_average(self) -> bool:
        return self.mean_normalized_cost <= 1.0 + SAFE_TOL

    def to_record(self) -> dict:
        return {
            "env": self.env,
            "method": self.method,
            "algo": self.algo,
            "K": self.K,
            "shared": self.shared,
            "mode": self.mode,
            "n_seeds": self.n_seeds,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "results": [r.to_record() for r in self.results],
            "aggregate": {
                "n_safe": self.n_safe,
                "n_thresholds": len(self.results),
                "mean_normalized_reward": self.mean_normalized_reward,
                "mean_normalized_cost": self.mean_normalized_cost,
                "safe_on_average": self.safe_on_average,
            },
            "provenance": self.provenance,
        }


EVAL_COLUMNS = ("env", "algo", "K", "shared", "threshold", "seed_count", "norm_reward",
                "norm_cost", "safe", "fallback_rate")
SUMMARY_COLUMNS = ("env", "algo", "K", "shared", "n_thresholds", "seed_count",
                   "mean_norm_reward", "mean_norm_cost", "n_safe", "safe_on_average")


def _cell(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return fmt_real(x)
    if x is None:
        return ""
    return str(x)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def eval_rows(reports) -> list[dict]:
    rows = []
    for rep in reports:
        for r in rep.results:
            rows.append({"env": rep.env, "algo": rep.method, "K": rep.K, "shared": rep.shared,
                         "threshold": r.kappa, "seed_count": rep.n_seeds,
                         "norm_reward": r.normalized_reward, "norm_cost": r.normalized_cost,
                         "safe": r.safe, "fallback_rate": r.fallback_rate})
    return rows


def summary_rows(reports) -> list[dict]:
    return [{"env": rep.env, "algo": rep.method, "K": rep.K, "shared": rep.shared,
             "n_thresholds": len(rep.results), "seed_count": rep.n_seeds,
             "mean_norm_reward": rep.mean_normalized_reward,
             "mean_norm_cost": rep.mean_normalized_cost, "n_safe": rep.n_safe,
             "safe_on_average": rep.safe_on_average} for rep in reports]


def eval_csv(reports) -> str:
    return _csv(EVAL_COLUMNS, eval_rows(reports))


def write_eval(reports, directory) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / "eval.csv", eval_csv(reports))
    atomic_write_text(d / "eval_summary.csv", _csv(SUMMARY_COLUMNS, summary_rows(reports)))
    atomic_write_text(d / "eval.json", dumps([rep.to_record() for rep in reports]) + "\n")


# ---------------------------------------------------------------------------
# evaluation


def occupancy(cmdp: Cmdp, actions: np.ndarray) -> np.ndarray:
    """State-budget occupancy ``d[t, s, b]`` of a tabulated policy from ``mu0`` at ``b = 0``."""
    T, S, B = cmdp.horizon, cmdp.n_states, cmdp.budget_size
    d = np.zeros((T, S, B))
    d[0, :, 0] = cmdp.mu0
    for t in range(T - 1):
        ss, bb = np.nonzero(d[t])
        mass = d[t, ss, bb]
        nxt = cmdp.transition[ss, actions[t, ss, bb]]  # (n, S')
        b2 = np.minimum(bb + cmdp.cost[ss], B - 1)
        np.add.at(d[t + 1], (slice(None), b2), (mass[:, None] * nxt).T)
    return d


def _head_info(policy, cmdp: Cmdp):
    if isinstance(policy, CapsPolicy):
        return policy.head_table(cmdp.budget_size), policy.ps.K
    return None, 1


def _evaluate_one(method: Method, cmdp: Cmdp, cfg: EvalConfig, kappa: float, index: int,
                  r_min: float, r_max: float, v0_min: float) -> ThresholdResult:
    policy = method.build(kappa)
    actions = policy_table(cmdp, policy)
    heads, K = _head_info(policy, cmdp)
    if cfg.mode == "exact":
        reward = evaluate_policy_reward(cmdp, policy, actions=actions).at_start(cmdp)
        cost = evaluate_policy_cost(cmdp, policy, actions=actions).at_start(cmdp)
        r_se = c_se = 0.0
        if heads is None:
            freqs, fallback = [1.0], 0.0
        else:
            d = occupancy(cmdp, actions) / cmdp.horizon
            head, fb = heads
            freqs = [float(d[head == k].sum()) for k in range(K)]
            fallback = float(d[fb].sum())
    else:
        rewards, costs, hs, fbs = [], [], [], []
        for seed in cfg.seeds:
            rng = RngSeed(seed).child("eval", index).generator()
            out = simulate_table(cmdp, actions, cfg.episodes_per_seed, rng)
            rewards.append(out["reward"])
            costs.append(out["cost"])
            if heads is not None:
                t = np.arange(cmdp.horizon)[:, None]
                hs.append(heads[0][t, out["states"], out["budgets"]].ravel())
                fbs.append(heads[1][t, out["states"], out["budgets"]].ravel())
        rw, cs = np.concatenate(rewards), np.concatenate(costs).astype(np.float64)
        reward, cost = float(rw.mean()), float(cs.mean())
        n = len(rw)
        r_se = float(rw.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        c_se = float(cs.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        if heads is None:
            freqs, fallback = [1.0], 0.0
        else:
            h, f = np.concatenate(hs), np.concatenate(fbs)
            freqs = [float(x) for x in np.bincount(h, minlength=K) / len(h)]
            fallback = float(f.mean())
    nr, nc = normalize(reward, cost, kappa, r_min, r_max)
    return ThresholdResult(kappa, nr, nc, reward, cost, r_se, c_se, nc <= 1.0 + SAFE_TOL,
                           fallback, freqs, v0_min <= kappa + SAFE_TOL)


def evaluate(artifact, cmdp: Cmdp, cfg: EvalConfig | None = None, vt: ValueTables | None = None,
             workers: int = 1, name: str | None = None) -> EvalReport:
    """Evaluate a method at every threshold of ``cfg``.

    ``artifact`` is a :class:`TrainedArtifacts` (evaluated through switching),
    a :class:`Method`, or a fixed cost-aware policy. Results are independent
    of ``workers``.
    """
    cfg = cfg or EvalConfig()
    method = as_method(artifact, name)
    vt = vt or solve(cmdp)
    r_min, r_max = reward_range(cmdp, vt)
    support = cmdp.mu0 > 0
    v0_min = float(vt.vc[0][support].max())

    def cell(i):
        return _evaluate_one(method, cmdp, cfg, cfg.thresholds[i], i, r_min, r_max, v0_min)

    idx = range(len(cfg.thresholds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(cell, idx))
    else:
        results = [cell(i) for i in idx]
    prov = {"artifact": method.digest, "env": cmdp.name, "env_digest": cmdp.digest(),
            "config": cfg.to_record()}
    n_seeds = len(cfg.seeds) if cfg.mode == "monte_carlo" else 0
    return EvalReport(cmdp.name, method.name, method.algo, method.K, method.shared, cfg.mode,
                      n_seeds, results, r_min, r_max, prov)


# ---------------------------------------------------------------------------
# threshold sweeps


SWEEP_COLUMNS = ("threshold_set", "method", "n_safe", "n_total")


@dataclass
class SweepTable:
    rows: list[dict]
    details: list[dict]

    def csv(self) -> str:
        return _csv(SWEEP_COLUMNS, self.rows)

    def to_record(self) -> dict:
        return {"rows": self.rows, "details": self.details}


def sweep_thresholds(methods: dict, cmdps: list[Cmdp], threshold_sets: dict,
                     cfg: EvalConfig | None = None, workers: int = 1) -> SweepTable:
    """Count environments kept safe per method and threshold set.

    ``methods[name]`` lists one artifact (or method) per entry of ``cmdps``.
    An environment counts as safe when the normalized cost averaged over the
    set's thresholds is at most 1.
    """
    cfg = cfg or EvalConfig()
    vts = [solve(m) for m in cmdps]
    rows, details = [], []
    for set_name, thresholds in threshold_sets.items():
        sub = EvalConfig(tuple(thresholds), cfg.seeds, cfg.episodes_per_seed, cfg.mode)
        for mname, arts in methods.items():
            if len(arts) != len(cmdps):
                raise ValueError(f"method {mname!r} has {len(arts)} artifacts for {len(cmdps)} envs")
            n_safe = 0
            for art, m, vt in zip(arts, cmdps, vts):
                rep = evaluate(art, m, sub, vt=vt, workers=workers, name=mname)
                n_safe += rep.safe_on_average
                details.append({"threshold_set": set_name, "method": mname, "env": m.name,
                                "mean_norm_cost": rep.mean_normalized_cost,
                                "mean_norm_reward": rep.mean_normalized_reward,
                                "safe": rep.safe_on_average,
                                "infeasible_thresholds": [r.kappa for r in rep.results
                                                          if not r.feasible]})
            rows.append({"threshold_set": set_name, "method": mname, "n_safe": n_safe,
                         "n_total": len(cmdps)})
    return SweepTable(rows, details)


# ---------------------------------------------------------------------------
# ablations


ABLATIONS = ("heads", "sharing", "fqe", "thresholds")
FQE_ARMS = ("reward_cost_fqe", "reward_fqe", "original")


@dataclass(frozen=True)
class SuiteConfig:
    envs: tuple[dict, ...] = ({"kind": "chain3"}, {"kind": "gridworld3"})
    algos: tuple[str, ...] = ("iql",)
    n_episodes: int = 500
    behavior: BehaviorSpec = BehaviorSpec()
    dataset_seed: int = 0
    train: dict = field(default_factory=dict)
    eval: EvalConfig = EvalConfig(thresholds=(1.0, 2.0, 4.0), mode="exact")
    heads: tuple[int, ...] = (2, 4, 8)
    threshold_sets: dict = field(default_factory=lambda: {"low": [1.0, 2.0, 4.0],
                                                          "high": [2.0, 4.0, 8.0]})

    @classmethod
    def from_record(cls, rec: dict) -> "SuiteConfig":
        rec = dict(rec)
        if "envs" in rec:
            rec["envs"] = tuple(rec["envs"])
        if "algos" in rec:
            rec["algos"] = tuple(rec["algos"])
        if "heads" in rec:
            rec["heads"] = tuple(rec["heads"])
        if "behavior" in rec:
            rec["behavior"] = BehaviorSpec(**rec["behavior"])
        if "eval" in rec:
            e = dict(rec["eval"])
            rec["eval"] = EvalConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in e.items()})
        return cls(**rec)


@dataclass
class AblationReport:
    kind: str
    columns: list[str]
    rows: list[dict]
    observations: list[dict]
    reports: list[dict]

    def csv(self) -> str:
        return _csv(self.columns, self.rows)

    def to_record(self) -> dict:
        return {"kind": self.kind, "columns": self.columns, "rows": self.rows,
                "observations": self.observations, "reports": self.reports}


def _prepare(suite: SuiteConfig):
    out = []
    for i, spec in enumerate(suite.envs):
        cmdp = make_env(spec)
        vt = solve(cmdp)
        ds = generate_dataset(cmdp, suite.behavior, suite.n_episodes,
                              RngSeed(suite.dataset_seed).child("suite", i), vt)
        out.append((cmdp, vt, ds))
    return out


def _train_cfg(suite: SuiteConfig, algo: str, **kw) -> TrainConfig:
    rec = dict(suite.train)
    if "hidden" in rec:
        rec["hidden"] = tuple(rec["hidden"])
    return TrainConfig.for_algo(algo, **{**rec, **kw})


def _wide(kind, arms, per_row, metric_names=("norm_reward", "norm_cost", "safe")):
    columns = ["env", "algo"] + [f"{arm}:{m}" for arm in arms for m in metric_names]
    rows = []
    for (env, algo), reps in per_row.items():
        row = {"env": env, "algo": algo}
        for arm in arms:
            rep = reps[arm]
            row[f"{arm}:norm_reward"] = rep.mean_normalized_reward
            row[f"{arm}:norm_cost"] = rep.mean_normalized_cost
            row[f"{arm}:safe"] = rep.safe_on_average
        rows.append(row)
    return columns, rows


def _observe(name: str, holds: bool, detail: dict) -> dict:
    status = "pass" if holds else "observe"
    log.info("observation %s: %s %s", name, status, detail)
    return {"finding": name, "status": status, **detail}


def run_ablation(kind: str, suite: SuiteConfig, workers: int = 1) -> AblationReport:
    """Train every arm of one ablation and tabulate it side by side.

    Directional findings are recorded in ``observations`` with status
    ``pass`` when they hold on this suite and ``observe`` otherwise; they
    never raise.
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
    envs = _prepare(suite)
    per_row: dict = {}
    observations: list[dict] = []
    reports: list[dict] = []

    def ev(art, cmdp, vt, name):
        rep = evaluate(art, cmdp, suite.eval, vt=vt, workers=workers, name=name)
        reports.append(rep.to_record())
        return rep

    if kind == "heads":
        arms = [f"K{K}" for K in suite.heads]
        for cmdp, vt, ds in envs:
            for algo in suite.algos:
                cell = per_row.setdefault((cmdp.name, algo), {})
                for K, arm in zip(suite.heads, arms):
                    art = train(ds, _train_cfg(suite, algo, K=K))
                    cell[arm] = ev(art, cmdp, vt, f"caps-{algo}-{arm}")
                if "K2" in cell and "K4" in cell:
                    observations.append(_observe(
                        "four heads reward >= two heads", cell["K4"].mean_normalized_reward
                        >= cell["K2"].mean_normalized_reward - 1e-12,
                        {"env": cmdp.name, "algo": algo}))
    elif kind == "sharing":
        arms = ["separate", "shared"]
        for cmdp, vt, ds in envs:
            for algo in suite.algos:
                cell = per_row.setdefault((cmdp.name, algo), {})
                for arm in arms:
                    art = train(ds, _train_cfg(suite, algo, shared_backbone=arm == "shared"))
                    cell[arm] = ev(art, cmdp, vt, f"caps-{algo}-{arm}")
                observations.append(_observe(
                    "shared backbone reward >= separate", cell["shared"].mean_normalized_reward
                    >= cell["separate"].mean_normalized_reward - 1e-12,
                    {"env": cmdp.name, "algo": algo}))
    elif kind == "fqe":
        arms = list(FQE_ARMS)
        for cmdp, vt, ds in envs:
            for algo in suite.algos:
                cfg = _train_cfg(suite, algo, K=2)
                art = train(ds, cfg)
                heads = art.tables()[0].actions
                qr = [fqe(ds, heads[k], "reward", cfg, tag=k).table() for k in range(2)]
                qc = [fqe(ds, heads[k], "cost", cfg, tag=k).table() for k in range(2)]
                variants = {
                    "reward_cost_fqe": Method("caps-fqe-rc", lambda k, a=art, r=qr, c=qc:
                                              caps_policy_fqe_variant(a, r, c, k), algo, 2,
                                              cfg.shared_backbone, art.digest()),
                    "reward_fqe": Method("caps-fqe-r", lambda k, a=art, r=qr:
                                         caps_policy_fqe_variant(a, r, None, k), algo, 2,
                                         cfg.shared_backbone, art.digest()),
                    "original": as_method(art, f"caps-{algo}"),
                }
                cell = per_row.setdefault((cmdp.name, algo), {})
                for arm in arms:
                    cell[arm] = ev(variants[arm], cmdp, vt, variants[arm].name)
                rc, orig = cell["reward_cost_fqe"], cell["original"]
                observations.append(_observe(
                    "reward-cost FQE more conservative than original",
                    rc.mean_normalized_cost < orig.mean_normalized_cost
                    and rc.mean_normalized_reward < orig.mean_normalized_reward,
                    {"env": cmdp.name, "algo": algo,
                     "cost": [rc.mean_normalized_cost, orig.mean_normalized_cost],
                     "reward": [rc.mean_normalized_reward, orig.mean_normalized_reward]}))
    else:
        methods: dict = {}
        cmdps = [cmdp for cmdp, _, _ in envs]
        for cmdp, vt, ds in envs:
            for algo in suite.algos:
                art = (oracle_artifacts(cmdp, 2, vt) if algo == "exact"
                       else train(ds, _train_cfg(suite, algo)))
                methods.setdefault(f"caps-{algo}", []).append(art)
            bc = train_bc(ds, _train_cfg(suite, "bc"))
            methods.setdefault("bc", []).append(bc.as_policy())
        table = sweep_thresholds(methods, cmdps, suite.threshold_sets, suite.eval, workers)
        return AblationReport(kind, list(SWEEP_COLUMNS), table.rows, observations,
                              table.details)
    columns, rows = _wide(kind, arms, per_row)
    return AblationReport(kind, columns, rows, observations, reports)


# ---------------------------------------------------------------------------
# safety-bound verification over random instances


@dataclass(frozen=True)
class FuzzSpec:
    n_instances: int = 200
    max_states: int = 8
    max_actions: int = 4
    max_horizon: int = 6
    max_cost: int = 3
    heads: tuple[int, ...] = (2, 4)
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(int(k) for k in self.heads))
        if self.n_instances < 1 or self.max_states < 1 or self.max_actions < 1:
            raise ValueError("fuzz sizes must be positive")
        if self.max_horizon < 1 or self.max_cost < 0:
            raise ValueError("max_horizon must be >= 1 and max_cost >= 0")


def fuzz_instance(spec: FuzzSpec, seed: RngSeed) -> Cmdp:
    rng = seed.child("shape").generator()
    S = int(rng.integers(1, spec.max_states + 1))
    A = int(rng.integers(1, spec.max_actions + 1))
    T = int(rng.integers(1, spec.max_horizon + 1))
    branching = 1 if spec.deterministic else int(rng.integers(1, S + 1))
    cost_max = int(rng.integers(0, spec.max_cost + 1))
    return make_random_cmdp(S, A, T, branching, cost_max, seed)


@dataclass
class VerifyReport:
    n_instances: int
    n_cases: int
    n_inadmissible: int
    max_violation: float
    failures: list[dict]
    max_epsilon: float

    @property
    def passed(self) -> bool:
        return self.n_inadmissible == 0 and not self.failures

    def to_record(self) -> dict:
        return {"passed": self.passed, **asdict(self)}


def _verify_instance(spec: FuzzSpec, seed: RngSeed):
    cmdp = fuzz_instance(spec, seed)
    vt = solve(cmdp)
    cases, bad, worst, eps, failures = 0, 0, float("-inf"), 0.0, []
    for K in spec.heads:
        art = oracle_artifacts(cmdp, K, vt)
        for kappa in range(cmdp.horizon * cmdp.c_max + 1):
            rep = verify_theorem_bound(cmdp, caps_policy(art, kappa), kappa, vt)
            cases += 1
            eps = max(eps, rep.epsilon)
            if not rep.applicable:
                bad += 1
                failures.append({"env": cmdp.name, "K": K, **rep.to_record()})
                continue
            worst = max(worst, rep.max_violation)
            if not rep.holds:
                failures.append({"env": cmdp.name, "K": K, **rep.to_record()})
    return cases, bad, worst, eps, failures


def fuzz_verify(spec: FuzzSpec, seed: int = 0, workers: int = 1) -> VerifyReport:
    """Check the safety bound for exact-table switching on random instances.

    Every instance is solved exactly; switching policies with ``K`` in
    ``spec.heads`` are checked for admissibility and for the bound at every
    integer threshold ``0 .. T * c_max``.
    """
    root = RngSeed(seed).child("fuzz")
    seeds = [root.child("instance", i) for i in range(spec.n_instances)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda sd: _verify_instance(spec, sd), seeds))
    else:
        parts = [_verify_instance(spec, sd) for sd in seeds]
    return VerifyReport(
        n_instances=spec.n_instances,
        n_cases=sum(p[0] for p in parts),
        n_inadmissible=sum(p[1] for p in parts),
        max_violation=max(p[2] for p in parts),
        failures=[f for p in parts for f in p[4]],
        max_epsilon=max(p[3] for p in parts),
    )


def write_ablation(report: AblationReport, directory) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    atomic_write_text(d / f"ablation_{report.kind}.csv", report.csv())
    atomic_write_text(d / f"ablation_{report.kind}.json", dumps(report.to_record()) + "\n")


__all__ = [
    "EvalConfig", "EvalReport", "ThresholdResult", "Method", "as_method", "normalize",
    "evaluate", "occupancy", "sweep_thresholds", "SweepTable", "SuiteConfig", "run_ablation",
    "AblationReport", "write_eval", "write_ablation", "eval_csv", "FuzzSpec", "VerifyReport",
    "fuzz_instance", "fuzz_verify",
]
