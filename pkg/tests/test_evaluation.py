import numpy as np
import pytest

from capsrl.caps import caps_policy
from capsrl.cmdp import (RISKY, SAFE, RngSeed, constant_policy, make_chain3, make_gridworld3,
                         make_random_cmdp)
from capsrl.dataset import BehaviorSpec
from capsrl.evaluation import (EVAL_COLUMNS, EvalConfig, FuzzSpec, SuiteConfig, as_method,
                               eval_csv, evaluate, fuzz_instance, fuzz_verify, normalize, occupancy,
                               run_ablation, sweep_thresholds, write_ablation, write_eval)
from capsrl.oracle import optimal_cost_variation, policy_table, solve
from capsrl.trainers import oracle_artifacts


def test_default_config():
    cfg = EvalConfig()
    assert len(cfg.seeds) == 3 and cfg.episodes_per_seed == 20 and len(cfg.thresholds) == 3
    with pytest.raises(ValueError):
        EvalConfig(thresholds=())
    with pytest.raises(ValueError):
        EvalConfig(thresholds=(0.0,))
    with pytest.raises(ValueError):
        EvalConfig(mode="bootstrap")


def test_normalize_examples():
    assert normalize(0.6, 2.0, 4.0, 0.2, 1.0) == pytest.approx((0.5, 0.5))
    assert normalize(1.0, 5.0, 5.0, 0.0, 1.0) == (1.0, 1.0)
    with pytest.raises(ValueError):
        normalize(1.0, 1.0, 1.0, 0.5, 0.5)
    with pytest.raises(ValueError):
        normalize(1.0, 1.0, 0.0, 0.0, 1.0)


def test_chain3_exact_report():
    m = make_chain3()
    rep = evaluate(oracle_artifacts(m), m, EvalConfig(thresholds=(0.5, 1.0), mode="exact"))
    lo, hi = rep.results
    assert (lo.normalized_reward, lo.normalized_cost) == pytest.approx((0.0, 0.0))
    assert (hi.normalized_reward, hi.normalized_cost) == pytest.approx((1.0, 1.0))
    assert lo.safe and hi.safe and rep.n_safe == 2
    assert rep.method == "caps-exact" and rep.n_seeds == 0
    assert sum(lo.head_frequencies) == pytest.approx(1.0)


def test_fixed_policy_can_be_unsafe():
    m = make_chain3()
    rep = evaluate(constant_policy(m, RISKY), m, EvalConfig(thresholds=(0.5,), mode="exact"),
                   name="risky")
    assert rep.results[0].normalized_cost == pytest.approx(2.0)
    assert not rep.results[0].safe and not rep.safe_on_average
    assert as_method(constant_policy(m, SAFE), "safe").name == "safe"


def test_occupancy_sums_to_one_per_step():
    m = make_gridworld3(0.2)
    pol = caps_policy(oracle_artifacts(m), 2.0)
    d = occupancy(m, policy_table(m, pol))
    assert np.allclose(d.sum(axis=(1, 2)), 1.0)


def test_monte_carlo_agrees_with_exact():
    m = make_gridworld3(0.2)
    art = oracle_artifacts(m, 4)
    exact = evaluate(art, m, EvalConfig(thresholds=(1.0, 3.0), mode="exact"))
    mc = evaluate(art, m, EvalConfig(thresholds=(1.0, 3.0), seeds=(0, 1), episodes_per_seed=1500))
    for e, s in zip(exact.results, mc.results):
        assert abs(e.raw_cost - s.raw_cost) <= 3 * s.cost_se + 1e-12
        assert abs(e.raw_reward - s.raw_reward) <= 3 * s.reward_se + 1e-12


def test_evaluation_is_deterministic_and_worker_independent(tmp_path):
    m = make_gridworld3(0.1)
    art = oracle_artifacts(m, 2)
    cfg = EvalConfig(thresholds=(1.0, 2.0, 4.0), seeds=(0, 1), episodes_per_seed=30)
    a = evaluate(art, m, cfg)
    b = evaluate(art, m, cfg, workers=3)
    assert eval_csv([a]) == eval_csv([b])
    write_eval([a], tmp_path)
    header = (tmp_path / "eval.csv").read_text().splitlines()[0]
    assert header == ",".join(EVAL_COLUMNS)
    assert (tmp_path / "eval_summary.csv").exists() and (tmp_path / "eval.json").exists()


def test_sweep_counts_safe_envs():
    envs = [make_chain3(), make_gridworld3(0.1)]
    methods = {"caps-exact": [oracle_artifacts(m) for m in envs],
               "risky": [constant_policy(m, RISKY) if m.name == "chain3" else
                         constant_policy(m, 0) for m in envs]}
    table = sweep_thresholds(methods, envs, {"low": [1.0, 2.0]},
                             EvalConfig(thresholds=(1.0,), mode="exact"))
    by = {r["method"]: r for r in table.rows}
    assert by["caps-exact"]["n_safe"] == 2 and by["caps-exact"]["n_total"] == 2
    assert len(table.details) == 4
    with pytest.raises(ValueError):
        sweep_thresholds({"x": envs[:1]}, envs, {"low": [1.0]})


SMALL = SuiteConfig(envs=({"kind": "chain3"},), algos=("tabular",), n_episodes=200,
                    behavior=BehaviorSpec(0.3, 0.4, 0.3, 0.2),
                    train={"fqe_sweeps": 2, "fqe_steps_per_sweep": 20, "steps": 50,
                           "hidden": [16]})


@pytest.mark.parametrize("kind,arms", [("heads", ["K2", "K4", "K8"]),
                                       ("sharing", ["separate", "shared"]),
                                       ("fqe", ["reward_cost_fqe", "reward_fqe", "original"])])
def test_ablation_shapes(tmp_path, kind, arms):
    rep = run_ablation(kind, SMALL)
    assert rep.columns == ["env", "algo"] + [f"{a}:{x}" for a in arms
                                             for x in ("norm_reward", "norm_cost", "safe")]
    assert len(rep.rows) == 1 and set(rep.rows[0]) == set(rep.columns)
    assert all(o["status"] in ("pass", "observe") for o in rep.observations)
    write_ablation(rep, tmp_path)
    assert (tmp_path / f"ablation_{kind}.csv").read_text().splitlines()[0] == ",".join(rep.columns)


def test_threshold_ablation_includes_baseline():
    rep = run_ablation("thresholds", SMALL)
    assert {r["method"] for r in rep.rows} == {"caps-tabular", "bc"}
    with pytest.raises(ValueError):
        run_ablation("dropout", SMALL)


def test_fuzz_verify_small():
    rep = fuzz_verify(FuzzSpec(n_instances=10), seed=3)
    assert rep.passed and rep.n_instances == 10 and rep.max_violation <= 1e-9
    assert fuzz_verify(FuzzSpec(n_instances=10), seed=3, workers=2).to_record() == rep.to_record()
    det = fuzz_instance(FuzzSpec(deterministic=True), RngSeed(0))
    assert np.all(det.transition.max(axis=2) == 1.0)


def test_random_cmdp_exact_eval_within_bound():
    m = make_random_cmdp(5, 3, 4, 2, 2, 11)
    vt = solve(m)
    rep = evaluate(oracle_artifacts(m, 4, vt), m, EvalConfig(thresholds=(1.0, 3.0, 6.0),
                                                            mode="exact"), vt=vt)
    eps = optimal_cost_variation(m, vt).epsilon
    for r in rep.results:
        bound = float(m.mu0 @ np.maximum(vt.vc[0], r.kappa)) + m.horizon * eps
        assert r.raw_cost <= bound + 1e-9
