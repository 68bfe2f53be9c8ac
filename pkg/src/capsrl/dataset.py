"""Offline datasets of timestamped transitions.

File layout: a JSON header line, a CSV column line, then one row per
transition::

    {"env_name": ..., "n_episodes": ..., "horizon": ..., "behavior": {...}, "seed": ...}
    t,s,a,r,c,s_next,c_next,done
    0,3,1,-0.01,0,4,0,0

``c_next`` is the cost of ``s_next``; learners need it to charge the terminal
state of an episode. Reals are written with 17 significant digits so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .cmdp import Cmdp, RngSeed, _draw, fmt_real
from .io import atomic_write_text
from .oracle import ValueTables

COLUMNS = ("t", "s", "a", "r", "c", "s_next", "c_next", "done")


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class RowArityError(DatasetError):
    def __init__(self, line: int, expected: int, got: int):
        super().__init__(f"line {line}: expected {expected} fields, got {got}")
        self.line = line


class CostFieldError(DatasetError):
    def __init__(self, line: int, value: str):
        super().__init__(f"line {line}: cost field {value!r} is not a non-negative integer")
        self.line = line


@dataclass(frozen=True)
class Transition:
    t: int
    s: int
    a: int
    r: float
    c: int
    s_next: int
    c_next: int
    done: bool


@dataclass(frozen=True)
class BehaviorSpec:
    weight_reward_greedy: float = 1 / 3
    weight_cost_greedy: float = 1 / 3
    weight_uniform: float = 1 / 3
    epsilon_explore: float = 0.1

    def __post_init__(self):
        w = self.weights
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"behavior weights must be >= 0 and sum to 1, got {w}")
        if not 0.0 <= self.epsilon_explore <= 1.0:
            raise ValueError(f"epsilon_explore {self.epsilon_explore} not in [0, 1]")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.weight_reward_greedy, self.weight_cost_greedy, self.weight_uniform)

    def to_record(self) -> dict:
        return {
            "weight_reward_greedy": self.weight_reward_greedy,
            "weight_cost_greedy": self.weight_cost_greedy,
            "weight_uniform": self.weight_uniform,
            "epsilon_explore": self.epsilon_explore,
        }


@dataclass(frozen=True)
class DatasetStats:
    return_min: float
    return_max: float
    return_mean: float
    cost_histogram: dict[int, int]
    coverage: float


@dataclass(eq=False)
class OfflineDataset:
    transitions: list[Transition]
    env_name: str
    n_states: int
    n_actions: int
    horizon: int
    n_episodes: int
    behavior: BehaviorSpec | None
    seed: int
    stats: DatasetStats | None = field(default=None)

    def __post_init__(self):
        if self.stats is None and self.transitions:
            self.stats = dataset_stats(self)

    def __len__(self):
        return len(self.transitions)

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return dumps_dataset(self) == dumps_dataset(other)

    def arrays(self) -> dict[str, np.ndarray]:
        """Columns as numpy arrays (cached)."""
        cache = self.__dict__.get("_arrays")
        if cache is None:
            tr = self.transitions
            cache = {
                "t": np.array([x.t for x in tr], dtype=np.int64),
                "s": np.array([x.s for x in tr], dtype=np.int64),
                "a": np.array([x.a for x in tr], dtype=np.int64),
                "r": np.array([x.r for x in tr], dtype=np.float64),
                "c": np.array([x.c for x in tr], dtype=np.int64),
                "s_next": np.array([x.s_next for x in tr], dtype=np.int64),
                "c_next": np.array([x.c_next for x in tr], dtype=np.int64),
                "done": np.array([x.done for x in tr], dtype=bool),
            }
            self.__dict__["_arrays"] = cache
        return cache

    def episodes(self):
        H = self.horizon
        for i in range(0, len(self.transitions), H):
            yield self.transitions[i:i + H]

    def digest(self) -> str:
        return hashlib.sha256(dumps_dataset(self).encode()).hexdigest()[:16]


def _greedy_tables(vt: ValueTables):
    return np.argmax(vt.qr, axis=2), np.argmin(vt.qc, axis=2)


def generate_dataset(cmdp: Cmdp, spec: BehaviorSpec, n_episodes: int, seed: RngSeed | int,
                     vt: ValueTables) -> OfflineDataset:
    """Roll out a behavior mixture.

    Each episode draws one component (reward-greedy, cost-greedy, uniform) by
    weight and follows it, replacing the component's action by a uniformly
    random one with probability ``epsilon_explore``.
    """
    if n_episodes <= 0:
        raise EmptyDatasetError("n_episodes must be positive")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    rng = seed.child("dataset").generator()
    greedy_r, greedy_c = _greedy_tables(vt)
    weights = np.array(spec.weights)
    T, A = cmdp.horizon, cmdp.n_actions
    out: list[Transition] = []
    for _ in range(n_episodes):
        comp = _draw(weights, rng.random())
        s = _draw(cmdp.mu0, rng.random())
        for t in range(T):
            explore = rng.random() < spec.epsilon_explore
            uniform_a = int(rng.integers(A))
            if comp == 2 or explore:
                a = uniform_a
            elif comp == 0:
                a = int(greedy_r[t, s])
            else:
                a = int(greedy_c[t, s])
            s2 = _draw(cmdp.transition[s, a], rng.random())
            out.append(Transition(t, s, a, float(cmdp.reward[s, a]), int(cmdp.cost[s]), s2,
                                  int(cmdp.cost[s2]), t == T - 1))
            s = s2
    return OfflineDataset(out, cmdp.name, cmdp.n_states, cmdp.n_actions, T, n_episodes, spec,
                          seed.seed)


def enumerate_dataset(cmdp: Cmdp) -> OfflineDataset:
    """Exhaustive-coverage dataset of a deterministic CMDP.

    One pseudo-episode per ``(s, a)`` repeats that pair at every timestep, so
    every ``(s, a, t)`` appears exactly once with its true successor. The rows
    do not chain into real trajectories.
    """
    if not cmdp.is_deterministic:
        raise DatasetError("exhaustive enumeration needs deterministic transitions")
    T = cmdp.horizon
    out = []
    for s in range(cmdp.n_states):
        for a in range(cmdp.n_actions):
            s2 = int(np.argmax(cmdp.transition[s, a]))
            for t in range(T):
                out.append(Transition(t, s, a, float(cmdp.reward[s, a]), int(cmdp.cost[s]), s2,
                                      int(cmdp.cost[s2]), t == T - 1))
    return OfflineDataset(out, cmdp.name, cmdp.n_states, cmdp.n_actions, T,
                          cmdp.n_states * cmdp.n_actions, None, 0)


def dataset_stats(ds: OfflineDataset) -> DatasetStats:
    if not ds.transitions:
        raise EmptyDatasetError("dataset has no transitions")
    returns, costs = [], Counter()
    for ep in ds.episodes():
        total = 0.0
        for x in ep:
            total += x.r
        returns.append(total)
        costs[sum(x.c for x in ep) + ep[-1].c_next] += 1
    seen = {(x.s, x.a, x.t) for x in ds.transitions}
    return DatasetStats(
        return_min=float(min(returns)),
        return_max=float(max(returns)),
        return_mean=float(np.mean(returns)),
        cost_histogram=dict(sorted(costs.items())),
        coverage=len(seen) / (ds.n_states * ds.n_actions * ds.horizon),
    )


# ---------------------------------------------------------------------------
# persistence


def dumps_dataset(ds: OfflineDataset) -> str:
    header = {
        "env_name": ds.env_name,
        "n_episodes": ds.n_episodes,
        "horizon": ds.horizon,
        "n_states": ds.n_states,
        "n_actions": ds.n_actions,
        "behavior": None if ds.behavior is None else ds.behavior.to_record(),
        "seed": ds.seed,
    }
    lines = [json.dumps(header), ",".join(COLUMNS)]
    for x in ds.transitions:
        lines.append(f"{x.t},{x.s},{x.a},{fmt_real(x.r)},{x.c},{x.s_next},{x.c_next},{int(x.done)}")
    return "\n".join(lines) + "\n"


def save_dataset(ds: OfflineDataset, path) -> None:
    atomic_write_text(path, dumps_dataset(ds))


def loads_dataset(text: str) -> OfflineDataset:
    lines = text.splitlines()
    if len(lines) < 2:
        raise MalformedHeaderError("missing header lines")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MalformedHeaderError(f"line 1: {e}") from None
    need = {"env_name", "n_episodes", "horizon", "n_states", "n_actions", "behavior", "seed"}
    if not isinstance(header, dict) or need - set(header):
        raise MalformedHeaderError(f"line 1: header must contain {sorted(need)}")
    if tuple(lines[1].split(",")) != COLUMNS:
        raise MalformedHeaderError(f"line 2: expected columns {','.join(COLUMNS)}")
    out = []
    for i, line in enumerate(lines[2:], start=3):
        parts = line.split(",")
        if len(parts) != len(COLUMNS):
            raise RowArityError(i, len(COLUMNS), len(parts))
        for j in (4, 6):
            if not parts[j].isdigit():
                raise CostFieldError(i, parts[j])
        try:
            out.append(Transition(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]),
                                  int(parts[4]), int(parts[5]), int(parts[6]), parts[7] == "1"))
        except ValueError as e:
            raise DatasetError(f"line {i}: {e}") from None
    H = int(header["horizon"])
    if len(out) != int(header["n_episodes"]) * H:
        raise RowArityError(len(lines) + 1, int(header["n_episodes"]) * H, len(out))
    beh = header["behavior"]
    return OfflineDataset(out, header["env_name"], int(header["n_states"]),
                          int(header["n_actions"]), H, int(header["n_episodes"]),
                          None if beh is None else BehaviorSpec(**beh), int(header["seed"]))


def load_dataset(path, expect_env: str | None = None) -> OfflineDataset:
    with open(path, encoding="utf-8") as fh:
        ds = loads_dataset(fh.read())
    if expect_env is not None and ds.env_name != expect_env:
        raise DatasetError(f"dataset was generated for {ds.env_name!r}, expected {expect_env!r}")
    return ds
