"""Exact finite-horizon dynamic programming on small CMDPs.

Value tables are non-stationary: ``q*[t]`` for ``t < T`` and ``v*[t]`` for
``t <= T``. The cost objective charges every visited state including the last
one, so ``vc[T] = c`` and ``qc[t][s][a] = c[s] + sum_s' P[s,a,s'] vc[t+1][s']``.
There is no discounting.

Cost-aware policies are evaluated on the augmented space ``(t, s, b)`` where
``b`` is the integer cost accumulated strictly before ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cmdp import Cmdp, CostAwarePolicy, PolicyError

TOL = 1e-9


@dataclass(frozen=True)
class ValueTables:
    qc: np.ndarray | None = None  # (T, S, A)
    vc: np.ndarray | None = None  # (T+1, S)
    qr: np.ndarray | None = None
    vr: np.ndarray | None = None

    def merged(self, other: "ValueTables") -> "ValueTables":
        return ValueTables(
            qc=self.qc if self.qc is not None else other.qc,
            vc=self.vc if self.vc is not None else other.vc,
            qr=self.qr if self.qr is not None else other.qr,
            vr=self.vr if self.vr is not None else other.vr,
        )


def backward_induction(P, stage, terminal, maximize: bool, allowed=None, fill=None):
    """Generic non-stationary backward induction.

    P is ``(T, S, A, S)``, stage is ``(T, S, A)``, terminal is ``(S,)``.
    ``allowed[t, s, a]`` restricts the optimization to permitted actions; a
    state with no permitted action takes its value from ``fill[t, s]``.
    Returns ``(q, v)`` with shapes ``(T, S, A)`` and ``(T+1, S)``.
    """
    T, S, A = stage.shape
    q = np.empty((T, S, A))
    v = np.empty((T + 1, S))
    v[T] = terminal
    for t in range(T - 1, -1, -1):
        q[t] = stage[t] + P[t] @ v[t + 1]
        if allowed is None:
            v[t] = q[t].max(axis=1) if maximize else q[t].min(axis=1)
        else:
            masked = np.where(allowed[t], q[t], -np.inf if maximize else np.inf)
            v[t] = masked.max(axis=1) if maximize else masked.min(axis=1)
            empty = ~allowed[t].any(axis=1)
            if empty.any():
                v[t][empty] = fill[t][empty]
    return q, v


def _stacked(cmdp: Cmdp):
    T = cmdp.horizon
    P = np.broadcast_to(cmdp.transition, (T,) + cmdp.transition.shape)
    return P


def solve_cost_optimal(cmdp: Cmdp) -> ValueTables:
    T, A = cmdp.horizon, cmdp.n_actions
    c = cmdp.cost.astype(np.float64)
    stage = np.broadcast_to(c[None, :, None], (T, cmdp.n_states, A))
    qc, vc = backward_induction(_stacked(cmdp), stage, c, maximize=False)
    return ValueTables(qc=qc, vc=vc)


def solve_reward_optimal(cmdp: Cmdp) -> ValueTables:
    T = cmdp.horizon
    stage = np.broadcast_to(cmdp.reward, (T,) + cmdp.reward.shape)
    qr, vr = backward_induction(_stacked(cmdp), stage, np.zeros(cmdp.n_states), maximize=True)
    return ValueTables(qr=qr, vr=vr)


def solve(cmdp: Cmdp) -> ValueTables:
    return solve_cost_optimal(cmdp).merged(solve_reward_optimal(cmdp))


def solve_reward_minimal(cmdp: Cmdp) -> np.ndarray:
    """Lowest achievable expected return-to-go, shape ``(T+1, S)``."""
    T = cmdp.horizon
    stage = np.broadcast_to(cmdp.reward, (T,) + cmdp.reward.shape)
    _, v = backward_induction(_stacked(cmdp), stage, np.zeros(cmdp.n_states), maximize=False)
    return v


def reward_range(cmdp: Cmdp, vt: ValueTables | None = None) -> tuple[float, float]:
    """``(r_min, r_max)`` of expected return from the initial distribution."""
    vr = (vt.vr if vt is not None and vt.vr is not None else solve_reward_optimal(cmdp).vr)
    return float(cmdp.mu0 @ solve_reward_minimal(cmdp)[0]), float(cmdp.mu0 @ vr[0])


# ---------------------------------------------------------------------------
# optimal-cost variation


@dataclass(frozen=True)
class VariationReport:
    epsilon: float
    witness: tuple | None  # (s, a, t, s_max, s_min)

    def to_record(self) -> dict:
        return {"epsilon": self.epsilon,
                "witness": None if self.witness is None else list(self.witness)}


def optimal_cost_variation(cmdp: Cmdp, vt: ValueTables | None = None) -> VariationReport:
    """Largest spread of ``vc[t+1]`` over the support of any ``(s, a)`` at ``t < T``."""
    vc = (vt if vt is not None and vt.vc is not None else solve_cost_optimal(cmdp)).vc
    sup = cmdp.transition > 0
    best, witness = 0.0, None
    for t in range(cmdp.horizon):
        nxt = vc[t + 1]
        hi = np.where(sup, nxt[None, None, :], -np.inf)
        lo = np.where(sup, nxt[None, None, :], np.inf)
        spread = hi.max(axis=2) - lo.min(axis=2)
        s, a = np.unravel_index(np.argmax(spread), spread.shape)
        if spread[s, a] > best:
            best = float(spread[s, a])
            witness = (int(s), int(a), t, int(np.argmax(hi[s, a])), int(np.argmin(lo[s, a])))
    return VariationReport(best, witness)


# ---------------------------------------------------------------------------
# cost-aware policies on the augmented space


def policy_table(cmdp: Cmdp, policy: CostAwarePolicy) -> np.ndarray:
    """Tabulate a cost-aware policy as ``actions[t, s, b]`` over ``b in 0..T*c_max``."""
    fast = getattr(policy, "action_table", None)
    if fast is not None:
        table = np.asarray(fast(cmdp), dtype=np.int64)
    else:
        T, S, B = cmdp.horizon, cmdp.n_states, cmdp.budget_size
        table = np.empty((T, S, B), dtype=np.int64)
        for t in range(T):
            for s in range(S):
                for b in range(B):
                    table[t, s, b] = policy(s, t, b)
    if table.shape != (cmdp.horizon, cmdp.n_states, cmdp.budget_size):
        raise PolicyError(f"action table has shape {table.shape}")
    if table.min() < 0 or table.max() >= cmdp.n_actions:
        raise PolicyError("policy produced an out-of-range action")
    return table


def _next_budget(cmdp: Cmdp) -> np.ndarray:
    B = cmdp.budget_size
    # unreachable (s, b) pairs may overflow the axis; clip them
    return np.minimum(np.arange(B)[None, :] + cmdp.cost[:, None], B - 1)


def reachable(cmdp: Cmdp, actions: np.ndarray) -> np.ndarray:
    """Boolean ``(T+1, S, B)`` mask of triples reachable from ``supp(mu0)`` at ``b = 0``."""
    T, S, B = cmdp.horizon, cmdp.n_states, cmdp.budget_size
    reach = np.zeros((T + 1, S, B), dtype=bool)
    reach[0, cmdp.mu0 > 0, 0] = True
    for t in range(T):
        ss, bb = np.nonzero(reach[t])
        aa = actions[t, ss, bb]
        i, sp = np.nonzero(cmdp.transition[ss, aa] > 0)
        reach[t + 1, sp, bb[i] + cmdp.cost[ss[i]]] = True
    return reach


def _evaluate(cmdp: Cmdp, actions: np.ndarray, stage: np.ndarray, terminal: np.ndarray):
    T, S, B = cmdp.horizon, cmdp.n_states, cmdp.budget_size
    nb = _next_budget(cmdp)
    sidx = np.arange(S)[:, None]
    v = np.empty((T + 1, S, B))
    v[T] = terminal[:, None]
    for t in range(T - 1, -1, -1):
        a = actions[t]  # (S, B)
        Psel = cmdp.transition[sidx, a]  # (S, B, S')
        vnext = v[t + 1][:, nb]  # (S', S, B)
        v[t] = stage[sidx, a] + np.einsum("sbk,ksb->sb", Psel, vnext)
    return v


@dataclass(frozen=True)
class AugmentedValue:
    v: np.ndarray  # (T+1, S, B)
    label: str = ""

    def at_start(self, cmdp: Cmdp) -> float:
        return float(cmdp.mu0 @ self.v[0, :, 0])


def evaluate_policy_cost(cmdp: Cmdp, policy: CostAwarePolicy, actions=None) -> AugmentedValue:
    actions = policy_table(cmdp, policy) if actions is None else actions
    c = cmdp.cost.astype(np.float64)
    stage = np.broadcast_to(c[:, None], (cmdp.n_states, cmdp.n_actions))
    return AugmentedValue(_evaluate(cmdp, actions, stage, c), getattr(policy, "label", ""))


def evaluate_policy_reward(cmdp: Cmdp, policy: CostAwarePolicy, actions=None) -> AugmentedValue:
    actions = policy_table(cmdp, policy) if actions is None else actions
    return AugmentedValue(_evaluate(cmdp, actions, cmdp.reward, np.zeros(cmdp.n_states)),
                          getattr(policy, "label", ""))


# ---------------------------------------------------------------------------
# admissibility and the safety bound


@dataclass(frozen=True)
class AdmissibilityReport:
    passed: bool
    counterexample: tuple | None  # (s, t, b)
    excess: float  # chosen qc minus its allowance at the counterexample
    n_checked: int

    def __bool__(self):
        return self.passed


def check_admissible(cmdp: Cmdp, policy: CostAwarePolicy, kappa: float,
                     vt: ValueTables | None = None, actions=None) -> AdmissibilityReport:
    """Check ``qc[t][s][pi(s,t,b)] <= max(vc[t][s], kappa - b)`` on reachable triples."""
    vt = vt if vt is not None and vt.qc is not None else solve_cost_optimal(cmdp)
    actions = policy_table(cmdp, policy) if actions is None else actions
    T, B = cmdp.horizon, cmdp.budget_size
    reach = reachable(cmdp, actions)
    b = np.arange(B)
    n = 0
    for t in range(T):
        chosen = np.take_along_axis(vt.qc[t], actions[t], axis=1)  # (S, B)
        allowance = np.maximum(vt.vc[t][:, None], kappa - b[None, :])
        bad = reach[t] & (chosen > allowance + TOL)
        n += int(reach[t].sum())
        if bad.any():
            s, bb = (int(x[0]) for x in np.nonzero(bad))
            return AdmissibilityReport(False, (s, t, bb), float(chosen[s, bb] - allowance[s, bb]), n)
    return AdmissibilityReport(True, None, 0.0, n)


@dataclass
class BoundReport:
    applicable: bool
    admissibility: AdmissibilityReport
    kappa: float
    epsilon: float = 0.0
    max_violation: float = float("-inf")
    worst: tuple | None = None  # (s, t, b)
    margins: np.ndarray | None = field(default=None, repr=False)  # NaN where unreachable
    expected_cost: float = float("nan")
    v0_cost_optimal: float = float("nan")

    @property
    def holds(self) -> bool:
        return self.applicable and self.max_violation <= TOL

    def to_record(self) -> dict:
        return {
            "applicable": self.applicable,
            "kappa": self.kappa,
            "epsilon": self.epsilon,
            "max_violation": None if not self.applicable else self.max_violation,
            "worst": None if self.worst is None else list(self.worst),
            "expected_cost": None if not self.applicable else self.expected_cost,
            "v0_cost_optimal": self.v0_cost_optimal,
            "admissible": self.admissibility.passed,
            "counterexample": (None if self.admissibility.counterexample is None
                               else list(self.admissibility.counterexample)),
        }


def verify_theorem_bound(cmdp: Cmdp, policy: CostAwarePolicy, kappa: float,
                         vt: ValueTables | None = None, actions=None) -> BoundReport:
    """Check ``V^pi_t(s, b) <= max(vc[t][s], kappa - b) + (T - t) * eps`` on reachable triples.

    ``max_violation`` is the largest left-minus-right margin (<= 0 when the
    bound holds). Policies that are not kappa-admissible are reported as not
    applicable.
    """
    vt = vt if vt is not None and vt.qc is not None else solve_cost_optimal(cmdp)
    actions = policy_table(cmdp, policy) if actions is None else actions
    adm = check_admissible(cmdp, policy, kappa, vt, actions=actions)
    v0 = float(cmdp.mu0 @ vt.vc[0])
    if not adm.passed:
        return BoundReport(False, adm, kappa, v0_cost_optimal=v0)
    eps = optimal_cost_variation(cmdp, vt).epsilon
    T, B = cmdp.horizon, cmdp.budget_size
    v = evaluate_policy_cost(cmdp, policy, actions=actions).v
    reach = reachable(cmdp, actions)
    t_idx = np.arange(T + 1)[:, None, None]
    b_idx = np.arange(B)[None, None, :]
    bound = np.maximum(vt.vc[:, :, None], kappa - b_idx) + (T - t_idx) * eps
    margins = np.where(reach, v - bound, np.nan)
    flat = np.nanargmax(margins)
    t, s, b = np.unravel_index(flat, margins.shape)
    return BoundReport(
        applicable=True,
        admissibility=adm,
        kappa=kappa,
        epsilon=eps,
        max_violation=float(margins[t, s, b]),
        worst=(int(s), int(t), int(b)),
        margins=margins,
        expected_cost=float(cmdp.mu0 @ v[0, :, 0]),
        v0_cost_optimal=v0,
    )
