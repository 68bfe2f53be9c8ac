"""Finite-horizon constrained MDPs, benchmark instances, and seeded rollouts.

Costs are non-negative integers attached to states; rewards attach to
state-action pairs. An episode visits states ``s_0 .. s_T``: actions are taken
at ``t = 0 .. T-1`` and the cost of the final state ``s_T`` is charged as well,
so a trajectory's total cost is ``sum_{t<T} c(s_t) + c(s_T)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import RngSeed

ROW_TOL = 1e-12

# (s, t, accumulated cost strictly before t) -> action
CostAwarePolicy = Callable[[int, int, int], int]


class InvalidSpecError(ValueError):
    """Raised when an instance cannot be built from the requested parameters."""


class PolicyError(RuntimeError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Cmdp:
    n_states: int
    n_actions: int
    horizon: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    cost: np.ndarray  # (S,) int
    c_max: int
    mu0: np.ndarray  # (S,)
    name: str = "cmdp"

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition, np.float64))
        object.__setattr__(self, "reward", _frozen(self.reward, np.float64))
        object.__setattr__(self, "cost", _frozen(self.cost, np.int64))
        object.__setattr__(self, "mu0", _frozen(self.mu0, np.float64))

    @property
    def budget_size(self) -> int:
        """Number of distinct accumulated-cost values ``0 .. T*c_max``."""
        return self.horizon * self.c_max + 1

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition > 0).sum(axis=2) == 1))

    def __eq__(self, other):
        if not isinstance(other, Cmdp):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __hash__(self):
        return hash(self.to_json())

    def to_json(self) -> str:
        return dumps(
            {
                "name": self.name,
                "n_states": self.n_states,
                "n_actions": self.n_actions,
                "horizon": self.horizon,
                "c_max": self.c_max,
                "transition": self.transition.tolist(),
                "reward": self.reward.tolist(),
                "cost": [int(c) for c in self.cost],
                "mu0": self.mu0.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Cmdp":
        d = json.loads(text)
        missing = {"name", "n_states", "n_actions", "horizon", "c_max", "transition",
                   "reward", "cost", "mu0"} - set(d)
        if missing:
            raise InvalidSpecError(f"cmdp document missing keys: {sorted(missing)}")
        return cls(
            n_states=int(d["n_states"]),
            n_actions=int(d["n_actions"]),
            horizon=int(d["horizon"]),
            transition=np.array(d["transition"], dtype=np.float64),
            reward=np.array(d["reward"], dtype=np.float64),
            cost=np.array(d["cost"], dtype=np.int64),
            c_max=int(d["c_max"]),
            mu0=np.array(d["mu0"], dtype=np.float64),
            name=str(d["name"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# text serialization with 17 significant digits


def fmt_real(x: float) -> str:
    return format(float(x), ".17g")


def dumps(obj) -> str:
    """JSON text with every float printed at 17 significant digits."""

    def enc(o):
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            v = float(o)
            if not np.isfinite(v):
                raise ValueError(f"non-finite value {v} cannot be serialized")
            return fmt_real(v)
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        if isinstance(o, np.ndarray):
            return enc(o.tolist())
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj)


def save_cmdp(cmdp: Cmdp, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, cmdp.to_json() + "\n")


def load_cmdp(path) -> Cmdp:
    with open(path, encoding="utf-8") as fh:
        return Cmdp.from_json(fh.read())


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    field: str
    index: tuple
    observed: object

    def __str__(self):
        return f"{self.field}{list(self.index)}: {self.observed}"


def validate(cmdp: Cmdp) -> list[Violation]:
    out: list[Violation] = []
    for name in ("n_states", "n_actions", "horizon"):
        if getattr(cmdp, name) < 1:
            out.append(Violation(name, (), getattr(cmdp, name)))
    S, A = cmdp.n_states, cmdp.n_actions
    P = cmdp.transition
    if P.shape != (S, A, S):
        out.append(Violation("transition.shape", (), P.shape))
    else:
        for s, a, s2 in zip(*np.nonzero(P < 0)):
            out.append(Violation("transition", (int(s), int(a), int(s2)), float(P[s, a, s2])))
        sums = P.sum(axis=2)
        for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
            out.append(Violation("transition.row_sum", (int(s), int(a)), float(sums[s, a])))
    if cmdp.reward.shape != (S, A):
        out.append(Violation("reward.shape", (), cmdp.reward.shape))
    if cmdp.cost.shape != (S,):
        out.append(Violation("cost.shape", (), cmdp.cost.shape))
    else:
        for s in np.nonzero((cmdp.cost < 0) | (cmdp.cost > cmdp.c_max))[0]:
            out.append(Violation("cost", (int(s),), int(cmdp.cost[s])))
    if cmdp.c_max < 0:
        out.append(Violation("c_max", (), cmdp.c_max))
    if cmdp.mu0.shape != (S,):
        out.append(Violation("mu0.shape", (), cmdp.mu0.shape))
    else:
        for s in np.nonzero(cmdp.mu0 < 0)[0]:
            out.append(Violation("mu0", (int(s),), float(cmdp.mu0[s])))
        if abs(cmdp.mu0.sum() - 1.0) > ROW_TOL:
            out.append(Violation("mu0.sum", (), float(cmdp.mu0.sum())))
    return out


def support(cmdp: Cmdp, s: int, a: int) -> frozenset[int]:
    if not (0 <= s < cmdp.n_states and 0 <= a < cmdp.n_actions):
        raise IndexError(f"(s={s}, a={a}) out of range for {cmdp.n_states}x{cmdp.n_actions}")
    return frozenset(int(x) for x in np.nonzero(cmdp.transition[s, a] > 0)[0])


# ---------------------------------------------------------------------------
# rollouts


@dataclass(frozen=True)
class Step:
    t: int
    s: int
    a: int
    r: float
    c: int


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    terminal_state: int
    terminal_cost: int
    total_reward: float = field(init=False)
    total_cost: int = field(init=False)

    def __post_init__(self):
        total_r = 0.0
        for st in self.steps:
            total_r += st.r
        object.__setattr__(self, "total_reward", total_r)
        object.__setattr__(self, "total_cost", sum(st.c for st in self.steps) + self.terminal_cost)

    def __len__(self):
        return len(self.steps)


def _draw(row: np.ndarray, u: float) -> int:
    cdf = np.cumsum(row)
    i = int(np.searchsorted(cdf, u, side="right"))
    if i >= len(row) or row[i] <= 0:
        # u landed in the rounding gap above cdf[-1]
        i = int(np.nonzero(row > 0)[0][-1])
    return i


def sample_episode(cmdp: Cmdp, policy: CostAwarePolicy, seed: RngSeed | int) -> Trajectory:
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    rng = seed.generator()
    s = _draw(cmdp.mu0, rng.random())
    b = 0
    steps = []
    for t in range(cmdp.horizon):
        a = policy(s, t, b)
        if not isinstance(a, (int, np.integer)) or not 0 <= a < cmdp.n_actions:
            raise PolicyError(f"policy returned invalid action {a!r} at s={s}, t={t}")
        a = int(a)
        c = int(cmdp.cost[s])
        steps.append(Step(t, s, a, float(cmdp.reward[s, a]), c))
        b += c
        s = _draw(cmdp.transition[s, a], rng.random())
    return Trajectory(tuple(steps), s, int(cmdp.cost[s]))


def simulate_table(cmdp: Cmdp, actions: np.ndarray, n_episodes: int, rng: np.random.Generator):
    """Vectorized rollouts of a tabulated cost-aware policy.

    ``actions[t, s, b]`` is the action at timestep t, state s, accumulated cost
    b (clipped to the table). Returns a dict with per-episode ``reward`` and
    ``cost`` (terminal cost included) and the visited ``states`` / ``budgets``
    arrays of shape ``(T, n)``.
    """
    T = cmdp.horizon
    nb = actions.shape[2]
    cdf0 = np.cumsum(cmdp.mu0)
    cdf = np.cumsum(cmdp.transition, axis=2)
    s = _draw_many(cdf0[None, :].repeat(n_episodes, 0), rng.random(n_episodes), cmdp.mu0[None, :])
    b = np.zeros(n_episodes, dtype=np.int64)
    reward = np.zeros(n_episodes)
    states = np.empty((T, n_episodes), dtype=np.int64)
    budgets = np.empty((T, n_episodes), dtype=np.int64)
    acts = np.empty((T, n_episodes), dtype=np.int64)
    for t in range(T):
        a = actions[t, s, np.minimum(b, nb - 1)]
        states[t], budgets[t], acts[t] = s, b, a
        reward += cmdp.reward[s, a]
        b = b + cmdp.cost[s]
        s = _draw_many(cdf[s, a], rng.random(n_episodes), cmdp.transition[s, a])
    cost = b + cmdp.cost[s]
    return {"reward": reward, "cost": cost, "states": states, "budgets": budgets,
            "actions": acts, "terminal": s}


def _draw_many(cdf: np.ndarray, u: np.ndarray, rows: np.ndarray) -> np.ndarray:
    idx = (cdf <= u[:, None]).sum(axis=1)
    rows = np.broadcast_to(rows, cdf.shape)
    n = rows.shape[1]
    bad = (idx >= n)
    if np.any(~bad):
        ok = ~bad
        bad[ok] = rows[ok, idx[ok]] <= 0
    if np.any(bad):
        last = n - 1 - np.argmax(rows[bad][:, ::-1] > 0, axis=1)
        idx[bad] = last
    return idx


# ---------------------------------------------------------------------------
# instances


def make_chain3() -> Cmdp:
    """Three states, two arms, one decision: safe (r=0.2, c=0) vs risky (r=1, c=1).

    Action 0 is ``safe`` (to s2, cost 0), action 1 is ``risky`` (to s1, cost 1).
    """
    P = np.zeros((3, 2, 3))
    P[0, SAFE, 2] = 1.0
    P[0, RISKY, 1] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    r = np.zeros((3, 2))
    r[0, SAFE] = 0.2
    r[0, RISKY] = 1.0
    return Cmdp(3, 2, 1, P, r, [0, 1, 0], 1, [1.0, 0.0, 0.0], name="chain3")


SAFE, RISKY = 0, 1

# N, E, S, W, stay
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0), (0, 0))


def make_hazard_gridworld(
    width: int,
    height: int,
    hazards: Iterable[Sequence[int]],
    goal: Sequence[int],
    slip_prob: float,
    horizon: int,
    start: Sequence[int] = (0, 0),
    name: str | None = None,
) -> Cmdp:
    """Grid navigation with hazard cells.

    Cells are ``(x, y)`` with state index ``y * width + x``. Actions move N/E/S/W
    or stay; walls block movement. A move slips 90 degrees left or right with
    probability ``slip_prob / 2`` each. The goal is absorbing and pays 1 per
    step spent there; every other step pays -0.01. Standing in a hazard costs 1.
    """
    hazards = {tuple(h) for h in hazards}
    goal, start = tuple(goal), tuple(start)
    if goal in hazards:
        raise InvalidSpecError(f"goal {goal} is a hazard cell")
    if width < 1 or height < 1 or width * height > 400:
        raise InvalidSpecError(f"grid {width}x{height} outside 1..400 cells")
    if not 0.0 <= slip_prob < 1.0:
        raise InvalidSpecError(f"slip_prob {slip_prob} not in [0, 1)")
    for cell in hazards | {goal, start}:
        if not (0 <= cell[0] < width and 0 <= cell[1] < height):
            raise InvalidSpecError(f"cell {cell} outside grid")

    S, A = width * height, len(MOVES)

    def idx(x, y):
        return y * width + x

    def move(x, y, d):
        dx, dy = MOVES[d]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return nx, ny
        return x, y

    P = np.zeros((S, A, S))
    r = np.full((S, A), -0.01)
    c = np.zeros(S, dtype=np.int64)
    for y in range(height):
        for x in range(width):
            s = idx(x, y)
            if (x, y) in hazards:
                c[s] = 1
            if (x, y) == goal:
                P[s, :, s] = 1.0
                r[s, :] = 1.0
                continue
            for a in range(A):
                if a == 4 or slip_prob == 0.0:
                    P[s, a, idx(*move(x, y, a))] += 1.0
                    continue
                P[s, a, idx(*move(x, y, a))] += 1.0 - slip_prob
                P[s, a, idx(*move(x, y, (a + 1) % 4))] += slip_prob / 2
                P[s, a, idx(*move(x, y, (a + 3) % 4))] += slip_prob / 2
    mu0 = np.zeros(S)
    mu0[idx(*start)] = 1.0
    name = name or f"grid{width}x{height}-slip{slip_prob:g}"
    return Cmdp(S, A, horizon, P, r, c, 1, mu0, name=name)


def make_gridworld3(slip_prob: float = 0.0, horizon: int = 6) -> Cmdp:
    """3x3 grid, hazard in the center, start and goal on opposite side midpoints.

    The straight route crosses the hazard, the detour around it is two steps
    longer, so reward-greedy and cost-greedy behavior differ.
    """
    return make_hazard_gridworld(3, 3, {(1, 1)}, goal=(2, 1), slip_prob=slip_prob,
                                 horizon=horizon, start=(0, 1),
                                 name=f"grid3-slip{slip_prob:g}")


def make_random_cmdp(
    n_states: int,
    n_actions: int,
    horizon: int,
    branching: int,
    cost_max: int,
    seed: RngSeed | int,
) -> Cmdp:
    if not 1 <= branching <= n_states:
        raise InvalidSpecError(f"branching {branching} must lie in 1..{n_states}")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    rng = seed.child("random-cmdp").generator()
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            nxt = rng.choice(n_states, size=branching, replace=False)
            w = rng.dirichlet(np.ones(branching))
            w = w / w.sum()
            P[s, a, nxt] = w
    reward = rng.random((n_states, n_actions))
    cost = rng.integers(0, cost_max + 1, size=n_states)
    mu0 = np.zeros(n_states)
    mu0[0] = 1.0
    return Cmdp(n_states, n_actions, horizon, P, reward, cost, cost_max, mu0,
                name=f"random-{n_states}x{n_actions}-T{horizon}-b{branching}-{seed.seed}")


def make_env(spec: dict) -> Cmdp:
    """Build an instance from a config mapping (``{"kind": ..., ...}``)."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "chain3":
        return make_chain3()
    if kind == "gridworld3":
        return make_gridworld3(**spec)
    if kind == "gridworld":
        return make_hazard_gridworld(**spec)
    if kind == "random":
        return make_random_cmdp(**spec)
    if kind == "file":
        return load_cmdp(spec["path"])
    raise InvalidSpecError(f"unknown env kind {kind!r}")


class TablePolicy:
    """Deterministic cost-aware policy backed by an action table.

    ``actions`` may be ``(T, S)`` (ignores accumulated cost) or ``(T, S, B)``;
    budgets beyond the table's last column reuse that column.
    """

    def __init__(self, actions, label: str = "table"):
        actions = np.asarray(actions, dtype=np.int64)
        if actions.ndim == 2:
            actions = actions[:, :, None]
        self.actions = actions
        self.label = label

    def __call__(self, s: int, t: int, b: int) -> int:
        return int(self.actions[t, s, min(b, self.actions.shape[2] - 1)])

    def action_table(self, cmdp: Cmdp) -> np.ndarray:
        B = cmdp.budget_size
        cols = np.minimum(np.arange(B), self.actions.shape[2] - 1)
        return self.actions[:, :, cols]


def constant_policy(cmdp: Cmdp, action: int, label: str | None = None) -> TablePolicy:
    return TablePolicy(np.full((cmdp.horizon, cmdp.n_states), action),
                       label=label or f"always-{action}")
