"""Constraint-adaptive policy switching at test time.

At state ``s``, timestep ``t`` and accumulated cost ``b`` (strictly before
``t``) every head proposes its action. A proposal is feasible when its
estimated cost-to-go fits the remaining budget, ``max(qc, 0) + b <= kappa``.
Among feasible proposals the one with the highest estimated reward-to-go is
taken; if nothing is feasible the proposal with the lowest estimated
cost-to-go is taken instead. Among feasible proposals ties go to the earlier
head (reward head first, then intermediate heads by ascending lambda, then the
cost head); in the fallback ties go to the later head, so an empty feasible set
always reproduces the cost head's action.

Everything works on tables indexed ``[t, s, a]``: learned estimators are
tabulated once over the finite state/time grid before switching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cmdp import Cmdp, RngSeed, _draw

FEAS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PolicySet:
    """Head proposals ``actions[k, t, s]`` ordered ``[pi_r, pi_1 .. pi_{K-2}, pi_c]``."""

    actions: np.ndarray
    lambdas: tuple[float, ...] = ()
    source: str = "tabular"

    def __post_init__(self):
        a = np.array(self.actions, dtype=np.int64)
        if a.ndim != 3 or a.shape[0] < 2:
            raise ValueError(f"need (K>=2, T, S) head actions, got shape {a.shape}")
        if len(self.lambdas) != a.shape[0] - 2:
            raise ValueError(f"{a.shape[0]} heads need {a.shape[0] - 2} lambdas, got {len(self.lambdas)}")
        a.setflags(write=False)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))

    @property
    def K(self) -> int:
        return self.actions.shape[0]

    def candidates(self, s: int, t: int) -> np.ndarray:
        return self.actions[:, t, s]


@dataclass(frozen=True)
class BudgetState:
    kappa: float
    c_before: int = 0


@dataclass(frozen=True)
class Decision:
    chosen_action: int
    chosen_head: int
    candidate_actions: tuple[int, ...]
    feasible_mask: tuple[bool, ...]
    fallback_used: bool
    qc_estimates: tuple[float, ...]
    qr_estimates: tuple[float, ...]

    def to_record(self) -> dict:
        return {
            "chosen_action": self.chosen_action,
            "chosen_head": self.chosen_head,
            "candidate_actions": list(self.candidate_actions),
            "feasible_mask": list(self.feasible_mask),
            "fallback_used": self.fallback_used,
            "qc_estimates": list(self.qc_estimates),
            "qr_estimates": list(self.qr_estimates),
        }


def greedy_heads(qr: np.ndarray, qc: np.ndarray, lambdas, allowed=None, fallback=None) -> np.ndarray:
    """Deterministic head tables from Q tables, shape ``(K, T, S)``.

    Head 0 maximizes ``qr``, the last head minimizes ``qc`` and the heads in
    between maximize ``qr - lambda_k * qc``. ``allowed[t, s, a]`` limits the
    argmax to permitted actions; ``fallback[t, s]`` is used where nothing is
    permitted. Ties resolve to the lowest action index.
    """
    objectives = [qr] + [qr - lam * qc for lam in lambdas] + [-qc]
    heads = []
    for obj in objectives:
        if allowed is not None:
            obj = np.where(allowed, obj, -np.inf)
        a = np.argmax(obj, axis=2)
        if allowed is not None:
            empty = ~allowed.any(axis=2)
            if empty.any():
                a = np.where(empty, fallback if fallback is not None else 0, a)
        heads.append(a)
    return np.stack(heads)


def _per_head(q: np.ndarray, K: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 3:
        return np.broadcast_to(q, (K,) + q.shape)
    if q.ndim == 4 and q.shape[0] == K:
        return q
    raise ValueError(f"Q table must be (T, S, A) or ({K}, T, S, A), got {q.shape}")


def candidate_values(ps: PolicySet, q: np.ndarray) -> np.ndarray:
    """``q`` at each head's own proposal, shape ``(K, T, S)``."""
    qk = _per_head(q, ps.K)
    return np.take_along_axis(qk, ps.actions[..., None], axis=3)[..., 0]


def feasible_set(ps: PolicySet, qc, s: int, t: int, budget: BudgetState) -> list[tuple[int, int]]:
    """Feasible ``(head, action)`` pairs at ``(s, t)``, one entry per head."""
    vals = candidate_values(ps, qc)[:, t, s]
    cand = ps.candidates(s, t)
    return [(k, int(cand[k])) for k in range(ps.K)
            if max(vals[k], 0.0) + budget.c_before <= budget.kappa + FEAS_TOL]


def _least_cost_head(qc_c: np.ndarray):
    """Index of the minimum along axis 0; ties go to the later head (cost head first)."""
    K = qc_c.shape[0]
    return K - 1 - np.argmin(qc_c[::-1], axis=0)


def select_action(ps: PolicySet, qr, qc, s: int, t: int, budget: BudgetState) -> Decision:
    cand = ps.candidates(s, t)
    qc_c = candidate_values(ps, qc)[:, t, s]
    qr_c = candidate_values(ps, qr)[:, t, s]
    feasible = np.maximum(qc_c, 0.0) + budget.c_before <= budget.kappa + FEAS_TOL
    if feasible.any():
        k = int(np.argmax(np.where(feasible, qr_c, -np.inf)))
        fallback = False
    else:
        k = int(_least_cost_head(np.maximum(qc_c, 0.0)))
        fallback = True
    return Decision(
        chosen_action=int(cand[k]),
        chosen_head=k,
        candidate_actions=tuple(int(a) for a in cand),
        feasible_mask=tuple(bool(f) for f in feasible),
        fallback_used=fallback,
        qc_estimates=tuple(float(x) for x in qc_c),
        qr_estimates=tuple(float(x) for x in qr_c),
    )


class CapsPolicy:
    """Cost-aware switching policy ``(s, t, b) -> action`` for a fixed ``kappa``."""

    def __init__(self, ps: PolicySet, qr, qc, kappa: float, label: str = "caps"):
        self.ps = ps
        self.qr = np.asarray(qr, dtype=np.float64)
        self.qc = np.asarray(qc, dtype=np.float64)
        self.kappa = float(kappa)
        self.label = label
        self._qr_c = candidate_values(ps, self.qr)  # (K, T, S)
        self._qc_c = np.maximum(candidate_values(ps, self.qc), 0.0)

    def decide(self, s: int, t: int, b: int) -> Decision:
        return select_action(self.ps, self.qr, self.qc, s, t, BudgetState(self.kappa, b))

    def __call__(self, s: int, t: int, b: int) -> int:
        return self.decide(s, t, b).chosen_action

    def head_table(self, n_budget: int):
        """Chosen head and fallback flag for every ``(t, s, b)`` with ``b < n_budget``."""
        b = np.arange(n_budget)
        feasible = self._qc_c[..., None] + b <= self.kappa + FEAS_TOL  # (K, T, S, B)
        score = np.where(feasible, self._qr_c[..., None], -np.inf)
        best = np.argmax(score, axis=0)
        any_feasible = feasible.any(axis=0)
        least_cost = _least_cost_head(self._qc_c)[..., None]
        head = np.where(any_feasible, best, least_cost)
        return head, ~any_feasible

    def action_table(self, cmdp: Cmdp) -> np.ndarray:
        head, _ = self.head_table(cmdp.budget_size)
        acts = np.broadcast_to(self.ps.actions[..., None], (self.ps.K,) + head.shape)
        return np.take_along_axis(acts, head[None], axis=0)[0]


def caps_policy(artifacts, kappa: float) -> CapsPolicy:
    """Build the switching policy from anything exposing ``tables()``.

    ``tables()`` must return ``(PolicySet, qr, qc)`` with Q tables over
    ``[t, s, a]``. A plain ``(PolicySet, qr, qc)`` tuple is accepted as well.
    """
    if hasattr(artifacts, "tables"):
        ps, qr, qc = artifacts.tables()
    else:
        ps, qr, qc = artifacts
    if qr is None or qc is None:
        raise ValueError("switching needs both a reward and a cost Q estimator")
    return CapsPolicy(ps, qr, qc, kappa, label=f"caps[{ps.source},K={ps.K}]")


def caps_policy_fqe_variant(artifacts, fqe_qr, fqe_qc=None, kappa: float = 0.0) -> CapsPolicy:
    """Switching with per-head evaluation estimators.

    ``fqe_qr[k]`` (and ``fqe_qc[k]`` when given) is head k's own Q table from
    fitted Q evaluation. Without ``fqe_qc`` the offline-RL cost critic is kept
    ("reward FQE"); with it both estimators come from FQE ("reward-cost FQE").
    """
    ps, _, qc = artifacts.tables() if hasattr(artifacts, "tables") else artifacts
    if len(fqe_qr) != ps.K:
        raise ValueError(f"need one reward estimator per head ({ps.K}), got {len(fqe_qr)}")
    qr_k = np.stack([np.asarray(q, dtype=np.float64) for q in fqe_qr])
    if fqe_qc is not None:
        if len(fqe_qc) != ps.K:
            raise ValueError(f"need one cost estimator per head ({ps.K}), got {len(fqe_qc)}")
        qc = np.stack([np.asarray(q, dtype=np.float64) for q in fqe_qc])
        label = "caps-fqe-rc"
    else:
        label = "caps-fqe-r"
    return CapsPolicy(ps, qr_k, qc, kappa, label=f"{label}[K={ps.K}]")


def trace_episode(cmdp: Cmdp, policy: CapsPolicy, seed: RngSeed | int) -> list[Decision]:
    """Decisions made along one sampled episode."""
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    rng = seed.generator()
    s = _draw(cmdp.mu0, rng.random())
    b = 0
    out = []
    for t in range(cmdp.horizon):
        d = policy.decide(s, t, b)
        out.append(d)
        b += int(cmdp.cost[s])
        s = _draw(cmdp.transition[s, d.chosen_action], rng.random())
    return out


def write_trace(decisions, path) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(d.to_record()) + "\n" for d in decisions))
