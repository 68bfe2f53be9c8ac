import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsrl.cmdp import (RISKY, SAFE, Cmdp, InvalidSpecError, PolicyError, TablePolicy,
                         constant_policy, load_cmdp, make_chain3, make_env, make_gridworld3,
                         make_hazard_gridworld, make_random_cmdp, sample_episode, save_cmdp,
                         simulate_table, support, validate)
from capsrl.oracle import evaluate_policy_cost, evaluate_policy_reward, optimal_cost_variation
from capsrl.rng import RngSeed


def two_state_chain(**over):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    kw = dict(n_states=2, n_actions=1, horizon=2, transition=P, reward=np.zeros((2, 1)),
              cost=[0, 1], c_max=1, mu0=[1.0, 0.0])
    kw.update(over)
    return Cmdp(**kw)


def test_validate_well_formed():
    assert validate(two_state_chain()) == []
    assert validate(make_chain3()) == []


def test_validate_row_sum():
    P = np.zeros((2, 1, 2))
    P[0, 0] = (0.5, 0.4)
    P[1, 0, 1] = 1.0
    bad = validate(two_state_chain(transition=P))
    assert len(bad) == 1
    assert bad[0].field == "transition.row_sum" and bad[0].index == (0, 0)


def test_validate_mu0_sum():
    bad = validate(two_state_chain(mu0=[0.7, 0.7]))
    assert [v.field for v in bad] == ["mu0.sum"]


def test_validate_cost_out_of_range():
    bad = validate(two_state_chain(cost=[0, 3]))
    assert [(v.field, v.index) for v in bad] == [("cost", (1,))]


def test_arrays_are_read_only():
    m = make_chain3()
    with pytest.raises(ValueError):
        m.transition[0, 0, 0] = 0.5


def test_chain3_rollouts():
    m = make_chain3()
    for seed in range(5):
        tr = sample_episode(m, constant_policy(m, SAFE), seed)
        assert tr.total_cost == 0 and tr.total_reward == pytest.approx(0.2)
        tr = sample_episode(m, constant_policy(m, RISKY), seed)
        assert tr.total_cost == 1 and tr.total_reward == pytest.approx(1.0)
        assert tr.terminal_state == 1 and len(tr) == 1


def test_rollout_determinism():
    m = make_gridworld3(slip_prob=0.3)
    pol = TablePolicy(np.random.default_rng(0).integers(0, 5, size=(6, 9)))
    a = sample_episode(m, pol, RngSeed(42))
    b = sample_episode(m, pol, RngSeed(42))
    assert a == b


def test_invalid_action_raises():
    m = make_chain3()
    with pytest.raises(PolicyError):
        sample_episode(m, lambda s, t, b: 7, 0)


def test_gridworld_deterministic_when_no_slip():
    m = make_gridworld3(slip_prob=0.0)
    assert m.is_deterministic
    assert optimal_cost_variation(m).epsilon == 0.0


def test_gridworld_with_slip_is_valid():
    m = make_hazard_gridworld(3, 3, [(1, 1)], goal=(2, 2), slip_prob=0.1, horizon=5)
    assert validate(m) == []
    assert not m.is_deterministic


def test_gridworld_goal_on_hazard_rejected():
    with pytest.raises(InvalidSpecError):
        make_hazard_gridworld(2, 2, [(1, 1)], goal=(1, 1), slip_prob=0.0, horizon=3)


def test_gridworld_layout():
    m = make_gridworld3()
    assert m.cost.tolist() == [0, 0, 0, 0, 1, 0, 0, 0, 0]
    assert m.mu0[3] == 1.0  # (0, 1)
    goal = 5  # (2, 1)
    assert np.all(m.transition[goal, :, goal] == 1.0)
    assert np.all(m.reward[goal] == 1.0)
    # moving east from the start walks into the hazard
    assert m.transition[3, 1, 4] == 1.0


def test_random_cmdp_degenerate_single_state():
    m = make_random_cmdp(1, 1, 1, 1, 0, 0)
    assert validate(m) == []
    tr = sample_episode(m, constant_policy(m, 0), 0)
    assert tr.total_cost == 0


def test_random_cmdp_same_seed_identical_bytes():
    a = make_random_cmdp(8, 4, 6, 3, 3, 11)
    b = make_random_cmdp(8, 4, 6, 3, 3, 11)
    assert a.to_json() == b.to_json()
    assert a.to_json() != make_random_cmdp(8, 4, 6, 3, 3, 12).to_json()


def test_random_cmdp_branching_one_is_deterministic():
    m = make_random_cmdp(6, 3, 4, 1, 2, 5)
    assert m.is_deterministic
    assert optimal_cost_variation(m).epsilon == 0.0


def test_support_examples():
    m = make_chain3()
    assert support(m, 0, RISKY) == frozenset({1})
    P = np.zeros((3, 1, 3))
    P[0, 0] = (0.5, 0, 0.5)
    P[1, 0] = (1, 0, 0)
    P[2, 0, 2] = 1.0
    m2 = Cmdp(3, 1, 1, P, np.zeros((3, 1)), [0, 0, 0], 0, [1, 0, 0])
    assert support(m2, 0, 0) == frozenset({0, 2})
    assert support(m2, 1, 0) == frozenset({0})
    with pytest.raises(IndexError):
        support(m2, 3, 0)


def test_json_round_trip(tmp_path):
    m = make_random_cmdp(5, 3, 4, 2, 2, 3)
    save_cmdp(m, tmp_path / "m.json")
    back = load_cmdp(tmp_path / "m.json")
    assert back == m
    assert np.array_equal(back.transition, m.transition)
    assert back.digest() == m.digest()
    assert make_env({"kind": "file", "path": str(tmp_path / "m.json")}) == m


def test_make_env_unknown_kind():
    with pytest.raises(InvalidSpecError):
        make_env({"kind": "maze"})


def test_simulate_table_matches_exact_values():
    m = make_gridworld3(slip_prob=0.2)
    acts = np.random.default_rng(1).integers(0, 5, size=(6, 9))
    pol = TablePolicy(acts)
    table = pol.action_table(m)
    out = simulate_table(m, table, 20000, RngSeed(3).generator())
    exact_c = evaluate_policy_cost(m, pol).at_start(m)
    exact_r = evaluate_policy_reward(m, pol).at_start(m)
    se_c = out["cost"].std() / np.sqrt(20000)
    se_r = out["reward"].std() / np.sqrt(20000)
    assert abs(out["cost"].mean() - exact_c) <= 4 * se_c + 1e-12
    assert abs(out["reward"].mean() - exact_r) <= 4 * se_r + 1e-12


@settings(max_examples=40, deadline=None)
@given(S=st.integers(1, 8), A=st.integers(1, 4), T=st.integers(1, 6), cmax=st.integers(0, 3),
       seed=st.integers(0, 2 ** 32), data=st.data())
def test_random_instances_are_valid(S, A, T, cmax, seed, data):
    br = data.draw(st.integers(1, S))
    m = make_random_cmdp(S, A, T, br, cmax, seed)
    assert validate(m) == []
    assert m.budget_size == T * cmax + 1
    tr = sample_episode(m, constant_policy(m, 0), seed)
    assert 0 <= tr.total_cost <= (T + 1) * cmax
