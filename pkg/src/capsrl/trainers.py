"""Training CAPS artifacts from an offline dataset.

Every trainer follows the same reduction: fit one reward critic and one cost
critic (the cost critic treats the dataset's cost column as its reward
signal), then extract K policy heads from those two critics. Intermediate
heads use the scalarized objective ``Q^r - lambda_k Q^c``.

Three variants are provided:

* ``iql``: expectile value regression plus advantage-weighted extraction.
* ``sacbc``: soft actor-critic with a behavior-cloning penalty, adapted to
  discrete actions (exact expectation over actions, NLL instead of squared
  action error).
* ``tabular``: certainty-equivalent DP on the empirical model.

The cost critic of ``iql`` regresses its value onto the *lower* expectile of
``Q^c`` so that it approximates the in-sample minimum cost-to-go.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .approximator import (
    Adam,
    Mlp,
    MlpSpec,
    MultiHeadPolicyNet,
    SeparatePolicyNets,
    dumps_params,
    expectile_loss,
    grid_encoding,
    load_into,
    loads_params,
    soft_policy_objective,
    softmax_policy,
    log_softmax,
    encode_states,
    td_loss,
    weighted_nll,
)
from .caps import PolicySet, greedy_heads
from .cmdp import Cmdp, RngSeed, dumps
from .dataset import EmptyDatasetError, OfflineDataset
from .io import atomic_write_text
from .oracle import ValueTables, backward_induction, solve

log = logging.getLogger(__name__)

ALGOS = ("iql", "sacbc", "tabular")


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "iql"
    K: int = 2
    steps: int = 2000
    batch_size: int = 512
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    gamma: float = 0.99
    beta: float = 3.0
    expectile_tau: float = 0.7
    alpha: float = 0.01
    bc_weight: float = 1.0
    seed: int = 0
    shared_backbone: bool = True
    hidden: tuple[int, ...] = (64, 64)
    weight_clip: float = 100.0
    actor_steps: int | None = None
    fqe_sweeps: int = 50
    fqe_steps_per_sweep: int = 40
    critic_lr_final: float = 1.0  # critic lr decays linearly to this fraction of lr_critic

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.algo not in ALGOS + ("bc",):
            raise ValueError(f"unknown algo {self.algo!r}")
        if self.K < 2 and self.algo != "bc":
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not 0.0 < self.expectile_tau < 1.0:
            raise ValueError(f"expectile_tau must lie in (0, 1), got {self.expectile_tau}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.beta <= 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0.0 < self.critic_lr_final <= 1.0:
            raise ValueError(f"critic_lr_final must lie in (0, 1], got {self.critic_lr_final}")

    @classmethod
    def for_algo(cls, algo: str, **overrides) -> "TrainConfig":
        base = {"sacbc": {"lr_actor": 1e-4, "lr_critic": 1e-3}}.get(algo, {})
        return cls(algo=algo, **{**base, **overrides})

    def to_record(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def lambda_schedule(K: int) -> list[float]:
    """``lambda_k = k / ((K - 1) / 2)`` for ``k = 1 .. K-2``."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    half = (K - 1) / 2
    return [k / half for k in range(1, K - 1)]


@dataclass(eq=False)
class TrainedArtifacts:
    """K policies plus the two critics used for switching."""

    config: TrainConfig
    n_states: int
    n_actions: int
    horizon: int
    lambda_values: list[float]
    source: str  # tabular | learned | oracle-exact
    head_actions: np.ndarray | None = None  # (K, T, S) for tabular artifacts
    q_reward: np.ndarray | Mlp | None = None  # table (T, S, A) or network
    q_cost: np.ndarray | Mlp | None = None
    policy_net: MultiHeadPolicyNet | SeparatePolicyNets | None = None
    value_nets: dict = field(default_factory=dict)
    dataset_hash: str = ""
    counters: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.config.K

    def _q_table(self, q) -> np.ndarray:
        if isinstance(q, np.ndarray):
            return q
        x = grid_encoding(self.n_states, self.horizon)
        return q.forward(x).reshape(self.horizon, self.n_states, self.n_actions)

    def head_table(self) -> np.ndarray:
        if self.head_actions is not None:
            return self.head_actions
        x = grid_encoding(self.n_states, self.horizon)
        logits = self.policy_net.forward(x)  # (K, T*S, A)
        return np.argmax(logits, axis=2).reshape(-1, self.horizon, self.n_states)

    def tables(self):
        cache = self.__dict__.get("_tables")
        if cache is None:
            ps = PolicySet(self.head_table(), tuple(self.lambda_values), self.source)
            cache = (ps, self._q_table(self.q_reward), self._q_table(self.q_cost))
            self.__dict__["_tables"] = cache
        return cache

    def head_probabilities(self) -> np.ndarray:
        """``(K, T, S, A)`` action probabilities of each head (one-hot for tables)."""
        if self.policy_net is None:
            ps, _, _ = self.tables()
            return np.eye(self.n_actions)[ps.actions]
        x = grid_encoding(self.n_states, self.horizon)
        p = softmax_policy(self.policy_net.forward(x))
        return p.reshape(p.shape[0], self.horizon, self.n_states, self.n_actions)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        ps, qr, qc = self.tables()
        for arr in (ps.actions, qr, qc):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _check(ds: OfflineDataset, cfg: TrainConfig, algo: str):
    if cfg.algo != algo:
        raise ValueError(f"config is for {cfg.algo!r}, trainer is {algo!r}")
    if len(ds) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    if len(lambda_schedule(cfg.K)) != cfg.K - 2:
        raise ValueError("head count inconsistent with lambda schedule")


def _encode(ds: OfflineDataset):
    arr = ds.arrays()
    x = encode_states(arr["s"], arr["t"], ds.n_states, ds.horizon)
    # successors at t + 1 (== T rows are terminal and never read)
    x2 = encode_states(arr["s_next"], arr["t"] + 1, ds.n_states, ds.horizon)
    return arr, x, x2


def _critic(ds: OfflineDataset, cfg: TrainConfig, rng) -> Mlp:
    return Mlp(MlpSpec(ds.n_states + 1, cfg.hidden, ds.n_actions), rng)


def _gather(q: np.ndarray, a: np.ndarray) -> np.ndarray:
    return q[np.arange(len(a)), a]


def _scatter(grad: np.ndarray, a: np.ndarray, A: int) -> np.ndarray:
    out = np.zeros((len(a), A))
    out[np.arange(len(a)), a] = grad
    return out


def _new_policy(ds, cfg, K, rng):
    cls = MultiHeadPolicyNet if cfg.shared_backbone else SeparatePolicyNets
    return cls(ds.n_states + 1, ds.n_actions, K, cfg.hidden, rng=rng)


# ---------------------------------------------------------------------------
# IQL


def _decay(opts, cfg: TrainConfig, i: int) -> None:
    frac = 1.0 - (1.0 - cfg.critic_lr_final) * i / max(cfg.steps - 1, 1)
    for opt in opts:
        opt.lr = cfg.lr_critic * frac


def _iql_critic(arr, x, x2, A, stage, terminal, cfg, rng, lower: bool, counters, tag: str):
    """One full critic run: Q by TD onto ``stage + gamma * V(s')``, V by expectile on Q."""
    n = len(stage)
    q = Mlp(MlpSpec(x.shape[1], cfg.hidden, A), rng)
    v = Mlp(MlpSpec(x.shape[1], cfg.hidden, 1), rng)
    q_opt, v_opt = Adam(q.params, cfg.lr_critic), Adam(v.params, cfg.lr_critic)
    a_all, done = arr["a"], arr["done"]
    for i in range(cfg.steps):
        _decay((q_opt, v_opt), cfg, i)
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        xb, ab = x[idx], a_all[idx]
        # value step toward the expectile of the current Q over dataset actions
        q_sa = _gather(q.forward(xb), ab)
        v_s = v.forward(xb)[:, 0]
        u = (v_s - q_sa) if lower else (q_sa - v_s)
        _, du = expectile_loss(u, cfg.expectile_tau)
        dv = (du if lower else -du) / len(idx)
        g, _ = v.backward(dv[:, None])
        v_opt.step(g)
        # Q step onto the bootstrapped target
        boot = v.forward(x2[idx])[:, 0]
        y = stage[idx] + cfg.gamma * np.where(done[idx], terminal[idx], boot)
        pred = _gather(q.forward(xb), ab)
        _, dq = td_loss(pred, y)
        g, _ = q.backward(_scatter(dq / len(idx), ab, A))
        q_opt.step(g)
    counters["critic_runs"] = counters.get("critic_runs", 0) + 1
    counters.setdefault("critic_updates", {})[tag] = cfg.steps
    return q, v


def _extract_awr(policy, x, a, weights, cfg, rng, counters, K):
    """Advantage-weighted likelihood for all heads; ``weights`` is ``(K, n)``."""
    n = len(a)
    steps = cfg.actor_steps or cfg.steps
    opt = Adam(policy.params, cfg.lr_actor)
    for _ in range(steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        logits = policy.forward(x[idx])
        grad = np.empty_like(logits)
        for k in range(K):
            _, grad[k] = weighted_nll(logits[k], a[idx], weights[k, idx] / len(idx))
        opt.step(policy.backward(grad))
    counters["head_extractions"] = counters.get("head_extractions", 0) + K
    counters["actor_updates"] = steps


def advantage_weights(adv_r, adv_c, lambdas, beta, clip):
    """Per-head ``exp(beta * A_k)`` clipped at ``clip``; ``A_k`` is ``A^r``,
    ``A^r - lambda_k A^c``, or ``-A^c``."""
    objs = [adv_r] + [adv_r - lam * adv_c for lam in lambdas] + [-adv_c]
    return np.stack([np.minimum(np.exp(np.minimum(beta * o, np.log(clip))), clip) for o in objs])


def train_iql_caps(ds: OfflineDataset, cfg: TrainConfig) -> TrainedArtifacts:
    _check(ds, cfg, "iql")
    t0 = time.perf_counter()
    lambdas = lambda_schedule(cfg.K)
    arr, x, x2 = _encode(ds)
    counters = {}
    root = RngSeed(cfg.seed)
    r, c = arr["r"], arr["c"].astype(np.float64)
    q_r, v_r = _iql_critic(arr, x, x2, ds.n_actions, r, np.zeros_like(r), cfg,
                           root.child("critic", 0).generator(), False, counters, "reward")
    q_c, v_c = _iql_critic(arr, x, x2, ds.n_actions, c, arr["c_next"].astype(np.float64), cfg,
                           root.child("critic", 1).generator(), True, counters, "cost")
    a = arr["a"]
    adv_r = _gather(q_r.forward(x), a) - v_r.forward(x)[:, 0]
    adv_c = _gather(q_c.forward(x), a) - v_c.forward(x)[:, 0]
    weights = advantage_weights(adv_r, adv_c, lambdas, cfg.beta, cfg.weight_clip)
    prng = root.child("actor").generator()
    policy = _new_policy(ds, cfg, cfg.K, prng)
    _extract_awr(policy, x, a, weights, cfg, prng, counters, cfg.K)
    counters["max_weight"] = float(weights.max())
    counters["seconds"] = round(time.perf_counter() - t0, 3)
    log.info("iql K=%d trained in %.1fs", cfg.K, counters["seconds"])
    return TrainedArtifacts(cfg, ds.n_states, ds.n_actions, ds.horizon, lambdas, "learned",
                            q_reward=q_r, q_cost=q_c, policy_net=policy,
                            value_nets={"v_reward": v_r, "v_cost": v_c},
                            dataset_hash=ds.digest(), counters=counters)


# ---------------------------------------------------------------------------
# SAC+BC (discrete adaptation)


def train_sacbc_caps(ds: OfflineDataset, cfg: TrainConfig) -> TrainedArtifacts:
    """Soft actor-critic with a behavior-cloning term.

    The reward critic bootstraps under the reward head and the cost critic
    under the cost head, each with the soft (entropy) correction. Head k
    maximizes ``E_pi[Q^k - alpha log pi] + bc_weight * log pi(a_data)``.
    """
    _check(ds, cfg, "sacbc")
    t0 = time.perf_counter()
    lambdas = lambda_schedule(cfg.K)
    arr, x, x2 = _encode(ds)
    root = RngSeed(cfg.seed)
    A, K, n = ds.n_actions, cfg.K, len(ds)
    q_r = _critic(ds, cfg, root.child("critic", 0).generator())
    q_c = _critic(ds, cfg, root.child("critic", 1).generator())
    policy = _new_policy(ds, cfg, K, root.child("actor").generator())
    opt_r, opt_c = Adam(q_r.params, cfg.lr_critic), Adam(q_c.params, cfg.lr_critic)
    opt_pi = Adam(policy.params, cfg.lr_actor)
    rng = root.child("batches").generator()
    r, c = arr["r"], arr["c"].astype(np.float64)
    c_next, a_all, done = arr["c_next"].astype(np.float64), arr["a"], arr["done"]
    for i in range(cfg.steps):
        _decay((opt_r, opt_c), cfg, i)
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        xb, ab, db = x[idx], a_all[idx], done[idx]
        logits_next = policy.forward(x2[idx])
        p_next, lp_next = softmax_policy(logits_next), log_softmax(logits_next)
        # reward critic under the reward head
        soft_r = (p_next[0] * (q_r.forward(x2[idx]) - cfg.alpha * lp_next[0])).sum(axis=1)
        y = r[idx] + cfg.gamma * np.where(db, 0.0, soft_r)
        _, dq = td_loss(_gather(q_r.forward(xb), ab), y)
        g, _ = q_r.backward(_scatter(dq / len(idx), ab, A))
        opt_r.step(g)
        # cost critic under the cost head; costs are minimized, so the entropy bonus enters with + sign
        soft_c = (p_next[-1] * (q_c.forward(x2[idx]) + cfg.alpha * lp_next[-1])).sum(axis=1)
        y = c[idx] + cfg.gamma * np.where(db, c_next[idx], soft_c)
        _, dq = td_loss(_gather(q_c.forward(xb), ab), y)
        g, _ = q_c.backward(_scatter(dq / len(idx), ab, A))
        opt_c.step(g)
        # actor: every head against its scalarized critic
        qr_b, qc_b = q_r.forward(xb), q_c.forward(xb)
        objectives = [qr_b] + [qr_b - lam * qc_b for lam in lambdas] + [-qc_b]
        logits = policy.forward(xb)
        grad = np.empty_like(logits)
        for k in range(K):
            _, g_soft = soft_policy_objective(logits[k], objectives[k], cfg.alpha)
            _, g_bc = weighted_nll(logits[k], ab, np.full(len(idx), cfg.bc_weight))
            grad[k] = (-g_soft + g_bc) / len(idx)
        opt_pi.step(policy.backward(grad))
    counters = {
        "critic_runs": 2,
        "critic_updates": {"reward": cfg.steps, "cost": cfg.steps},
        "head_extractions": K,
        "actor_updates": cfg.steps,
        "seconds": round(time.perf_counter() - t0, 3),
    }
    log.info("sacbc K=%d trained in %.1fs", K, counters["seconds"])
    return TrainedArtifacts(cfg, ds.n_states, ds.n_actions, ds.horizon, lambdas, "learned",
                            q_reward=q_r, q_cost=q_c, policy_net=policy,
                            dataset_hash=ds.digest(), counters=counters)


# ---------------------------------------------------------------------------
# tabular


@dataclass(frozen=True)
class EmpiricalModel:
    P: np.ndarray  # (T, S, A, S)
    reward: np.ndarray  # (T, S, A)
    state_cost: np.ndarray  # (S,)
    observed: np.ndarray  # (T, S, A) bool
    counts: np.ndarray  # (T, S, A)


def empirical_model(ds: OfflineDataset) -> EmpiricalModel:
    T, S, A = ds.horizon, ds.n_states, ds.n_actions
    arr = ds.arrays()
    t, s, a, s2 = arr["t"], arr["s"], arr["a"], arr["s_next"]
    N = np.zeros((T, S, A, S))
    np.add.at(N, (t, s, a, s2), 1.0)
    R = np.zeros((T, S, A))
    np.add.at(R, (t, s, a), arr["r"])
    counts = N.sum(axis=3)
    observed = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        P = np.where(observed[..., None], N / counts[..., None], 0.0)
        reward = np.where(observed, R / counts, 0.0)
    state_cost = np.zeros(S)
    state_cost[s] = arr["c"]
    state_cost[s2] = arr["c_next"]
    return EmpiricalModel(P, reward, state_cost, observed, counts)


def train_tabular_caps(ds: OfflineDataset, cfg: TrainConfig) -> TrainedArtifacts:
    """Exact DP on the empirical model restricted to observed ``(s, a, t)``.

    Unobserved entries get pessimistic values: the worst observed per-step
    reward and cost for every remaining step. Heads choose among observed
    actions only; ``(s, t)`` with no observed action falls back to the most
    frequent dataset action.
    """
    _check(ds, cfg, "tabular")
    lambdas = lambda_schedule(cfg.K)
    m = empirical_model(ds)
    T, S, A = ds.horizon, ds.n_states, ds.n_actions
    arr = ds.arrays()
    r_lo = min(0.0, float(arr["r"].min()))
    c_hi = float(max(arr["c"].max(), arr["c_next"].max()))
    steps_left = (T - np.arange(T))[:, None]  # remaining actions at t
    fill_r = np.broadcast_to(steps_left * r_lo, (T, S))
    fill_c = np.broadcast_to((steps_left + 1) * c_hi, (T, S))
    stage_c = np.broadcast_to(m.state_cost[None, :, None], (T, S, A))
    qr, vr = backward_induction(m.P, m.reward, np.zeros(S), True, m.observed, fill_r)
    qc, vc = backward_induction(m.P, stage_c, m.state_cost, False, m.observed, fill_c)
    if not m.observed.all():
        qr = np.where(m.observed, qr, fill_r[..., None])
        qc = np.where(m.observed, qc, fill_c[..., None])
    fallback = int(np.bincount(arr["a"], minlength=A).argmax())
    heads = greedy_heads(qr, qc, lambdas, m.observed, fallback)
    counters = {
        "critic_runs": 2,
        "critic_updates": {"reward": 1, "cost": 1},
        "head_extractions": cfg.K,
        "coverage": float(m.observed.mean()),
    }
    return TrainedArtifacts(cfg, S, A, T, lambdas, "tabular", head_actions=heads,
                            q_reward=qr, q_cost=qc,
                            value_nets={"v_reward": vr, "v_cost": vc},
                            dataset_hash=ds.digest(), counters=counters)


def oracle_artifacts(cmdp: Cmdp, K: int = 2, vt: ValueTables | None = None) -> TrainedArtifacts:
    """Heads and critics computed from the true model."""
    vt = vt or solve(cmdp)
    lambdas = lambda_schedule(K)
    heads = greedy_heads(vt.qr, vt.qc, lambdas)
    cfg = TrainConfig(algo="tabular", K=K, gamma=1.0)
    return TrainedArtifacts(cfg, cmdp.n_states, cmdp.n_actions, cmdp.horizon, lambdas,
                            "oracle-exact", head_actions=heads, q_reward=vt.qr, q_cost=vt.qc,
                            value_nets={"v_reward": vt.vr, "v_cost": vt.vc},
                            counters={"critic_runs": 2, "head_extractions": K})


def train(ds: OfflineDataset, cfg: TrainConfig) -> TrainedArtifacts:
    fn = {"iql": train_iql_caps, "sacbc": train_sacbc_caps, "tabular": train_tabular_caps}
    return fn[cfg.algo](ds, cfg)


# ---------------------------------------------------------------------------
# behavior cloning baseline


class HeadPolicy:
    """Greedy action of one head, ignoring the cost budget."""

    def __init__(self, actions: np.ndarray, label: str = "head"):
        self.actions = np.asarray(actions, dtype=np.int64)  # (T, S)
        self.label = label

    def __call__(self, s, t, b):
        return int(self.actions[t, s])

    def action_table(self, cmdp: Cmdp) -> np.ndarray:
        return np.repeat(self.actions[:, :, None], cmdp.budget_size, axis=2)


@dataclass(eq=False)
class BcPolicy:
    net: MultiHeadPolicyNet
    n_states: int
    horizon: int

    def probabilities(self) -> np.ndarray:
        x = grid_encoding(self.n_states, self.horizon)
        p = softmax_policy(self.net.forward(x)[0])
        return p.reshape(self.horizon, self.n_states, -1)

    def as_policy(self) -> HeadPolicy:
        return HeadPolicy(np.argmax(self.probabilities(), axis=2), "bc")


def train_bc(ds: OfflineDataset, cfg: TrainConfig) -> BcPolicy:
    if len(ds) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    arr, x, _ = _encode(ds)
    rng = RngSeed(cfg.seed).child("bc").generator()
    net = MultiHeadPolicyNet(x.shape[1], ds.n_actions, 1, cfg.hidden, rng=rng)
    opt = Adam(net.params, cfg.lr_actor)
    n, a = len(ds), arr["a"]
    for _ in range(cfg.actor_steps or cfg.steps):
        idx = rng.integers(n, size=min(cfg.batch_size, n))
        logits = net.forward(x[idx])
        _, g = weighted_nll(logits[0], a[idx], np.full(len(idx), 1.0 / len(idx)))
        opt.step(net.backward(g[None]))
    return BcPolicy(net, ds.n_states, ds.horizon)


# ---------------------------------------------------------------------------
# fitted Q evaluation


@dataclass(eq=False)
class FqeEstimate:
    net: Mlp
    objective: str
    n_states: int
    n_actions: int
    horizon: int
    residuals: list[float]

    def table(self) -> np.ndarray:
        x = grid_encoding(self.n_states, self.horizon)
        return self.net.forward(x).reshape(self.horizon, self.n_states, self.n_actions)


def fqe(ds: OfflineDataset, policy_actions: np.ndarray, objective: str, cfg: TrainConfig,
        tag: int = 0) -> FqeEstimate:
    """Fitted Q evaluation of a deterministic ``(T, S)`` policy table.

    Each sweep freezes a copy of the estimator, builds targets
    ``stage + gamma * Q_frozen(s', pi(s', t+1))`` and regresses on them for a
    fixed number of minibatch steps.
    """
    if objective not in ("reward", "cost"):
        raise ValueError(f"objective must be 'reward' or 'cost', got {objective!r}")
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    arr, x, x2 = _encode(ds)
    policy_actions = np.asarray(policy_actions, dtype=np.int64)
    rng = RngSeed(cfg.seed).child(f"fqe-{objective}", tag).generator()
    q = _critic(ds, cfg, rng)
    opt = Adam(q.params, cfg.lr_critic)
    n, A, T = len(ds), ds.n_actions, ds.horizon
    a, done = arr["a"], arr["done"]
    if objective == "reward":
        stage, terminal = arr["r"], np.zeros(n)
    else:
        stage, terminal = arr["c"].astype(np.float64), arr["c_next"].astype(np.float64)
    t_next = np.minimum(arr["t"] + 1, T - 1)
    a_next = policy_actions[t_next, arr["s_next"]]
    residuals = []
    for _ in range(cfg.fqe_sweeps):
        frozen = q.copy()
        boot = _gather(frozen.forward(x2), a_next)
        y = stage + cfg.gamma * np.where(done, terminal, boot)
        for _ in range(cfg.fqe_steps_per_sweep):
            idx = rng.integers(n, size=min(cfg.batch_size, n))
            _, dq = td_loss(_gather(q.forward(x[idx]), a[idx]), y[idx])
            g, _ = q.backward(_scatter(dq / len(idx), a[idx], A))
            opt.step(g)
        residuals.append(float(np.mean((_gather(q.forward(x), a) - y) ** 2)))
    log.debug("fqe %s residual %.3g", objective, residuals[-1])
    return FqeEstimate(q, objective, ds.n_states, A, T, residuals)


# ---------------------------------------------------------------------------
# checkpoints


def _save_net(path: Path, net, kind: str, cfg: TrainConfig) -> None:
    header = {"kind": kind, "seed": cfg.seed, "hidden": list(cfg.hidden)}
    if isinstance(net, Mlp):
        header["spec"] = net.spec.to_record()
    else:
        header["K"] = net.K
        header["n_actions"] = net.n_actions
        header["shared"] = isinstance(net, MultiHeadPolicyNet)
    atomic_write_text(path, dumps_params(header, net.params))


def save_artifacts(art: TrainedArtifacts, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    if art.source == "learned":
        for name, net in (("q_reward", art.q_reward), ("q_cost", art.q_cost),
                          ("policy", art.policy_net), *sorted(art.value_nets.items())):
            fname = f"{name}.ckpt"
            _save_net(d / fname, net, name, art.config)
            files[name] = fname
    else:
        tables = {
            "head_actions": art.head_actions.tolist(),
            "q_reward": art.q_reward.tolist(),
            "q_cost": art.q_cost.tolist(),
        }
        atomic_write_text(d / "tables.json", dumps(tables) + "\n")
        files["tables"] = "tables.json"
    manifest = {
        "source": art.source,
        "config": art.config.to_record(),
        "n_states": art.n_states,
        "n_actions": art.n_actions,
        "horizon": art.horizon,
        "lambda_values": art.lambda_values,
        "dataset_hash": art.dataset_hash,
        "counters": {k: v for k, v in art.counters.items() if k != "seconds"},
        "files": files,
    }
    atomic_write_text(d / "manifest.json", dumps(manifest) + "\n")


def load_artifacts(directory) -> TrainedArtifacts:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    cfg_rec = dict(man["config"])
    cfg = TrainConfig(**cfg_rec)
    S, A, T = man["n_states"], man["n_actions"], man["horizon"]
    art = TrainedArtifacts(cfg, S, A, T, list(man["lambda_values"]), man["source"],
                           dataset_hash=man["dataset_hash"], counters=man["counters"])
    if man["source"] == "learned":
        rng = None
        art.q_reward = Mlp(MlpSpec(S + 1, cfg.hidden, A), rng)
        art.q_cost = Mlp(MlpSpec(S + 1, cfg.hidden, A), rng)
        cls = MultiHeadPolicyNet if cfg.shared_backbone else SeparatePolicyNets
        art.policy_net = cls(S + 1, A, cfg.K, cfg.hidden)
        for name, target in (("q_reward", art.q_reward), ("q_cost", art.q_cost),
                             ("policy", art.policy_net)):
            _, values = loads_params((d / man["files"][name]).read_text())
            load_into(target.params, values)
        for name in ("v_reward", "v_cost"):
            if name in man["files"]:
                v = Mlp(MlpSpec(S + 1, cfg.hidden, 1))
                _, values = loads_params((d / man["files"][name]).read_text())
                load_into(v.params, values)
                art.value_nets[name] = v
    else:
        tab = json.loads((d / man["files"]["tables"]).read_text())
        art.head_actions = np.array(tab["head_actions"], dtype=np.int64)
        art.q_reward = np.array(tab["q_reward"], dtype=np.float64)
        art.q_cost = np.array(tab["q_cost"], dtype=np.float64)
    return art


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
