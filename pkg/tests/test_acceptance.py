"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (section "acceptance criteria")
and, with ``-s``, as each test finishes.
"""

import itertools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from capsrl.approximator import (entropy, expectile_loss, soft_policy_objective, td_loss,
                                 weighted_nll)
from capsrl.caps import caps_policy, trace_episode
from capsrl.cmdp import Cmdp, RngSeed, make_chain3, make_gridworld3, make_random_cmdp
from capsrl.dataset import BehaviorSpec, enumerate_dataset, generate_dataset
from capsrl.evaluation import (EvalConfig, FuzzSpec, SuiteConfig, evaluate, fuzz_instance,
                               fuzz_verify, run_ablation)
from capsrl.oracle import evaluate_policy_cost, optimal_cost_variation, solve
from capsrl.trainers import (TrainConfig, empirical_model, lambda_schedule, oracle_artifacts,
                             train)
from conftest import ACCEPTANCE, run_pipeline, tree_bytes

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(n: int, title: str):
    """Record the outcome of criterion ``n``; ``detail`` may be filled in by the body."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException:
        ACCEPTANCE[n] = (title, False, info["detail"] or "assertion failed")
        print(f"criterion {n} FAIL {title}: {info['detail']}")
        raise
    ACCEPTANCE[n] = (title, True, info["detail"])
    print(f"criterion {n} PASS {title}: {info['detail']}")


def positive_cost(m: Cmdp) -> Cmdp:
    """Same instance with every state cost raised by one."""
    return Cmdp(m.n_states, m.n_actions, m.horizon, m.transition, m.reward, m.cost + 1,
                m.c_max + 1, m.mu0, name=m.name + "+1")


# ---------------------------------------------------------------------------


def test_c01_safety_bound_on_fuzzed_instances():
    with criterion(1, "safety bound on 200 fuzzed CMDPs") as info:
        t0 = time.perf_counter()
        rep = fuzz_verify(FuzzSpec(n_instances=200, max_states=8, max_actions=4,
                                   max_horizon=6, max_cost=3, heads=(2, 4)), seed=0)
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"{rep.n_cases} cases, {rep.n_inadmissible} inadmissible, "
                          f"max violation {rep.max_violation:.3g}, {elapsed:.1f}s")
        assert rep.n_instances >= 200
        assert rep.n_inadmissible == 0
        assert rep.max_violation <= 1e-9
        assert rep.passed
        assert elapsed < 60


def test_c02_deterministic_tightness():
    with criterion(2, "deterministic tightness, no slack") as info:
        spec = FuzzSpec(deterministic=True)
        worst, n_checks = -np.inf, 0
        for i in range(25):
            m = fuzz_instance(spec, RngSeed(1).child("det", i))
            vt = solve(m)
            assert optimal_cost_variation(m, vt).epsilon == 0.0
            art = oracle_artifacts(m, 2, vt)
            starts = np.flatnonzero(m.mu0 > 0)
            for kappa in range(m.horizon * m.c_max + 1):
                v = evaluate_policy_cost(m, caps_policy(art, kappa)).v[0, starts, 0]
                margin = v - np.maximum(vt.vc[0, starts], kappa)
                worst = max(worst, float(margin.max()))
                n_checks += len(starts)
        info["detail"] = f"25 instances, {n_checks} (start, kappa) checks, max margin {worst:.3g}"
        assert worst <= 1e-9


def test_c03_boundary_policies():
    with criterion(3, "boundary budgets") as info:
        envs = [positive_cost(make_gridworld3(0.2)), positive_cost(make_chain3())]
        envs += [positive_cost(make_random_cmdp(6, 3, 5, 2, 2, s)) for s in range(4)]
        steps = 0
        for m, K in itertools.product(envs, (2, 4, 8)):
            vt = solve(m)
            arts = [oracle_artifacts(m, K, vt)]
            ds = generate_dataset(m, BehaviorSpec(0.3, 0.4, 0.3, 0.2), 300, 5, vt)
            arts.append(train(ds, TrainConfig(algo="tabular", K=K)))
            for art in arts:
                zero = caps_policy(art, 0.0)
                # the terminal state's cost is charged, so the worst-case episode
                # cost is (T + 1) * c_max rather than T * c_max
                top = caps_policy(art, (m.horizon + 1) * m.c_max)
                for seed in range(5):
                    for d in trace_episode(m, zero, seed):
                        assert d.fallback_used
                        assert d.chosen_action == d.candidate_actions[-1]
                        steps += 1
                    for d in trace_episode(m, top, seed):
                        assert d.qr_estimates[d.chosen_head] >= d.qr_estimates[0]
                        steps += 1
        info["detail"] = (f"{len(envs)} envs x K in (2,4,8) x exact/tabular, {steps} decisions; "
                          "full budget is (T+1)*c_max")


def test_c04_tabular_matches_oracle():
    with criterion(4, "tabular training reproduces the oracle") as info:
        cells = 0
        for m in (make_chain3(), make_gridworld3()):
            vt = solve(m)
            art = train(enumerate_dataset(m), TrainConfig(algo="tabular", K=2, gamma=1.0))
            ref = oracle_artifacts(m, 2, vt)
            _, qr, qc = art.tables()
            assert np.max(np.abs(qr - vt.qr)) <= 1e-12
            assert np.max(np.abs(qc - vt.qc)) <= 1e-12
            kappas = np.arange(0.0, (m.horizon + 1) * m.c_max + 1.0, 0.5)
            for kappa in kappas:
                a, b = caps_policy(art, kappa), caps_policy(ref, kappa)
                assert np.array_equal(a.action_table(m), b.action_table(m))
                ha, hb = a.head_table(m.budget_size), b.head_table(m.budget_size)
                assert np.array_equal(ha[0], hb[0]) and np.array_equal(ha[1], hb[1])
                for t, s, bud in itertools.product(range(m.horizon), range(m.n_states),
                                                   range(m.budget_size)):
                    assert a.decide(s, t, bud) == b.decide(s, t, bud)
                    cells += 1
        info["detail"] = f"Q tables within 1e-12, {cells} augmented decisions identical"


LEARNED = {
    "iql": dict(expectile_tau=0.95, critic_lr_final=0.1, steps=5000, batch_size=256,
                lr_critic=1e-3, gamma=1.0),
    "sacbc": dict(alpha=1e-3, bc_weight=0.01, lr_actor=1e-3, lr_critic=1e-3, batch_size=256,
                  steps=3000, critic_lr_final=0.1, gamma=1.0),
}


@pytest.mark.slow
def test_c05_learned_critic_accuracy():
    with criterion(5, "learned cost critics within 0.1 of the oracle") as info:
        envs = [(m, solve(m)) for m in (make_chain3(), make_gridworld3())]
        errors = {algo: [] for algo in LEARNED}
        slowest = 0.0
        for seed in range(3):
            data = [(m, vt, generate_dataset(m, BehaviorSpec(0.3, 0.4, 0.3, 0.2), 5000, seed, vt))
                    for m, vt in envs]
            for algo, kw in LEARNED.items():
                worst = 0.0
                for m, vt, ds in data:
                    t0 = time.perf_counter()
                    qc = train(ds, TrainConfig.for_algo(algo, seed=seed, **kw)).tables()[2]
                    slowest = max(slowest, time.perf_counter() - t0)
                    covered = empirical_model(ds).observed
                    worst = max(worst, float(np.abs(qc - vt.qc)[covered].max()))
                errors[algo].append(worst)
        info["detail"] = "; ".join(f"{a} max err per seed {[round(e, 4) for e in errs]}"
                                   for a, errs in errors.items())
        info["detail"] += f"; slowest run {slowest:.0f}s"
        for errs in errors.values():
            assert sum(e <= 0.1 for e in errs) >= 2
        assert slowest < 300


H, REL = 1e-5, 1e-4


def _fd(f, x):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + H
        hi = f()
        x[i] = old - H
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * H)
    return g


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def test_c06_loss_kernel_gradients():
    with criterion(6, "loss kernel gradients and expectile identity") as info:
        worst = 0.0
        for i in range(100):
            rng = np.random.default_rng(1000 + i)
            tau = float(rng.uniform(0.05, 0.95))
            u = rng.normal(size=7)
            u[np.abs(u) < 1e-3] += 0.01  # keep finite differences away from the kink
            pred, target = rng.normal(size=7), rng.normal(size=7)
            logits = rng.normal(size=(5, 4))
            acts = rng.integers(0, 4, size=5)
            w = rng.uniform(0.1, 2.0, size=5)
            q = rng.normal(size=(5, 4))
            alpha = float(rng.uniform(0.01, 1.0))
            checks = [
                (expectile_loss(u, tau)[1], _fd(lambda: expectile_loss(u, tau)[0].sum(), u)),
                (td_loss(pred, target)[1], _fd(lambda: td_loss(pred, target)[0].sum(), pred)),
                (weighted_nll(logits, acts, w)[1],
                 _fd(lambda: weighted_nll(logits, acts, w)[0], logits)),
                (soft_policy_objective(logits, q, alpha)[1],
                 _fd(lambda: soft_policy_objective(logits, q, alpha)[0].sum(), logits)),
            ]
            for analytic, numeric in checks:
                err = _rel(analytic, numeric)
                worst = max(worst, err)
                assert err < REL
            assert np.all(np.isfinite(entropy(logits)))
            assert np.array_equal(expectile_loss(u, 0.5)[0], 0.5 * u * u)
            assert np.array_equal(expectile_loss(u, 0.5)[0], td_loss(u, 0.0)[0])
        info["detail"] = f"100 draws x 4 kernels, worst relative error {worst:.2e}"


def test_c07_lambda_schedule():
    with criterion(7, "lambda schedule") as info:
        assert lambda_schedule(2) == []
        assert lambda_schedule(4) == [2 / 3, 4 / 3]
        assert lambda_schedule(8) == [k / 3.5 for k in range(1, 7)]
        info["detail"] = "K=2,4,8 exact"


def test_c08_two_critic_runs_per_artifact():
    with criterion(8, "two critic runs per artifact, any K") as info:
        m = make_chain3()
        ds = generate_dataset(m, BehaviorSpec(0.3, 0.4, 0.3, 0.2), 100, 0, solve(m))
        seen = []
        for algo, K in itertools.product(("iql", "sacbc", "tabular"), (2, 4, 8)):
            art = train(ds, TrainConfig.for_algo(algo, K=K, steps=20, batch_size=32,
                                                 hidden=(8,)))
            assert art.counters["critic_runs"] == 2
            assert art.counters["head_extractions"] == K
            seen.append((algo, K, art.counters["critic_runs"]))
        info["detail"] = f"{len(seen)} (algo, K) artifacts, critic runs all 2"


def test_c09_ablation_harness_shape():
    with criterion(9, "ablation harness shape") as info:
        suite = SuiteConfig(envs=({"kind": "chain3"}, {"kind": "gridworld3", "slip_prob": 0.1}),
                            algos=("iql", "sacbc"), n_episodes=100,
                            train={"steps": 40, "batch_size": 64, "hidden": [16],
                                   "fqe_sweeps": 2, "fqe_steps_per_sweep": 20})
        expected = {"heads": ["K2", "K4", "K8"], "sharing": ["separate", "shared"],
                    "fqe": ["original", "reward_fqe", "reward_cost_fqe"]}
        notes = []
        for kind, arms in expected.items():
            rep = run_ablation(kind, suite)
            arm_cols = {c.split(":")[0] for c in rep.columns[2:]}
            assert rep.columns[:2] == ["env", "algo"] and arm_cols == set(arms)
            assert all(c.split(":")[1] in ("norm_reward", "norm_cost", "safe")
                       for c in rep.columns[2:])
            assert len(rep.rows) == 4
            assert all(o["status"] in ("pass", "observe") for o in rep.observations)
            n_pass = sum(o["status"] == "pass" for o in rep.observations)
            notes.append(f"{kind}: {len(rep.rows)} rows, {n_pass}/{len(rep.observations)} pass")
        info["detail"] = "; ".join(notes)


def test_c10_evaluation_protocol():
    with criterion(10, "evaluation protocol and Monte Carlo agreement") as info:
        cfg = EvalConfig()
        assert (len(cfg.seeds), cfg.episodes_per_seed, len(cfg.thresholds)) == (3, 20, 3)
        pairs = [(make_chain3(), 0.5), (make_chain3(), 1.0), (make_gridworld3(0.2), 1.0),
                 (make_gridworld3(0.2), 3.0), (make_random_cmdp(6, 3, 5, 3, 2, 17), 2.0)]
        zs = []
        for i, (m, kappa) in enumerate(pairs):
            vt = solve(m)
            art = oracle_artifacts(m, 4, vt)
            exact = evaluate(art, m, EvalConfig((kappa,), mode="exact"), vt=vt).results[0]
            mc = evaluate(art, m, EvalConfig((kappa,), seeds=(i,), episodes_per_seed=10_000),
                          vt=vt).results[0]
            for e, s, se in ((exact.raw_cost, mc.raw_cost, mc.cost_se),
                             (exact.raw_reward, mc.raw_reward, mc.reward_se)):
                assert abs(e - s) <= 3 * se + 1e-12
                if se > 1e-12:  # deterministic outcomes have no spread to compare against
                    zs.append(abs(e - s) / se)
        info["detail"] = f"5 (env, kappa) pairs at 10,000 episodes, max |z| {max(zs):.2f}"


def test_c11_pipeline_determinism(tmp_path):
    with criterion(11, "byte-identical pipeline reruns") as info:
        a = tree_bytes(run_pipeline(tmp_path / "a"))
        b = tree_bytes(run_pipeline(tmp_path / "b"))
        assert a.keys() == b.keys()
        assert any(k.endswith(".ckpt") for k in a) and "dataset.csv" in a
        assert any(k.endswith(".csv") and k != "dataset.csv" for k in a)
        same = [k for k in a if a[k] == b[k]]
        info["detail"] = f"{len(same)}/{len(a)} files identical"
        assert len(same) == len(a)
