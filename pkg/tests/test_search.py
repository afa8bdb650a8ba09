import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dop.envs import CoopNavEnv, joint_action_index
from dop.mdp import StateId
from dop.qfunc import NeuralQ, TabularQ
from dop.search import (
    ExplorationLedger,
    SearchConfig,
    SearchNode,
    admissible_actions,
    exploration_bonus,
    lambda_schedule,
    rollout,
    ucb_select,
    uct_search,
)

NOOP, UP, DOWN, RIGHT, LEFT = range(5)


class NoExploreRng:
    """Stand-in generator whose exploration draw never fires."""

    def random(self):
        return 1.0


def zero_q(env):
    return TabularQ(env.n_actions).initialize(env.encoding_size, env.n_actions)


# ---------------------------------------------------------------- admissible set


def test_admissible_threshold_example():
    assert admissible_actions([0.9, 0.5, 0.2], 0.5, 0.3, NoExploreRng()) == [0, 1]


def test_admissible_lambda_extremes():
    q = [0.3, 0.0, 0.7, 0.7]
    assert admissible_actions(q, 0.0, 0.0, None) == [0, 1, 2, 3]
    assert admissible_actions(q, 1.0, 0.0, None) == [2, 3]


def test_admissible_negative_max_falls_back_to_argmax():
    assert admissible_actions([-3.0, -1.0, -2.0], 0.5, 0.0, None) == [1]


def test_admissible_exploration_adds_one_action():
    rng = np.random.default_rng(0)
    sizes = [len(admissible_actions([1.0, 0.0, 0.0, 0.0, 0.0], 1.0, 1.0, rng)) for _ in range(200)]
    assert set(sizes) <= {1, 2} and 2 in sizes


def test_admissible_argmax_membership_property():
    rng = np.random.default_rng(123)
    for _ in range(10_000):
        n = int(rng.integers(1, 12))
        q = rng.normal(size=n) * rng.choice([0.1, 1.0, 10.0])
        lam = float(rng.random())
        eps = float(rng.random())
        chosen = admissible_actions(q, lam, eps, rng)
        assert int(np.argmax(q)) in chosen
        base = set(np.flatnonzero(q >= lam * q.max())) if q.max() >= 0 else {int(np.argmax(q))}
        assert len(set(chosen) - base) <= 1


def test_admissible_rejects_bad_input():
    with pytest.raises(ValueError):
        admissible_actions([], 0.5, 0.0, None)
    with pytest.raises(ValueError):
        admissible_actions([1.0], 1.5, 0.0, None)


# ---------------------------------------------------------------- UCB


def test_bonus_example():
    assert exploration_bonus(0.7, 5, 1) == pytest.approx(0.8880, abs=1e-4)
    assert exploration_bonus(0.7, 5, 1) == pytest.approx(0.7 * math.sqrt(math.log(5)), abs=1e-12)


def test_bonus_edge_cases():
    assert exploration_bonus(0.7, 1, 1) == 0.0
    assert exploration_bonus(0.7, 4, 0) == math.inf


def test_bonus_grid_matches_scalar_formula():
    for c in (0.0, 0.1, 0.7, 1.0, 2.5):
        for total in range(2, 60, 3):
            for visits in range(1, total + 1, 2):
                expect = c * math.sqrt(math.log(total) / visits)
                assert abs(exploration_bonus(c, total, visits) - expect) <= 1e-12


def test_ucb_equal_counts_tie_goes_to_lowest_index():
    node = SearchNode(None, 5)
    node.counts[:] = 1
    node.total = 5
    assert ucb_select(node, np.zeros(5), 0.7, range(5)) == 0
    assert node.counts[0] == 2 and node.total == 6


def test_ucb_unvisited_action_wins_regardless_of_value():
    node = SearchNode(None, 3)
    node.counts[:] = [4, 0, 4]
    node.total = 8
    assert ucb_select(node, np.array([10.0, -10.0, 10.0]), 0.7, [0, 1, 2]) == 1


def test_ucb_single_visit_single_action_scores_value():
    node = SearchNode(None, 2)
    node.counts[:] = [1, 0]
    node.total = 1
    assert ucb_select(node, np.array([0.3, 0.0]), 0.7, [0]) == 0


def test_ucb_empty_admissible_set():
    with pytest.raises(ValueError):
        ucb_select(SearchNode(None, 2), np.zeros(2), 0.7, [])


# ---------------------------------------------------------------- roll-outs


class TwoStepChain:
    """Deterministic chain paying 0.5 then 1.0, then terminal (non-absorbing)."""

    n_actions = 1
    encoding_size = 3
    absorbing_terminal = False

    def __init__(self):
        self.states = [StateId(np.eye(3)[k]) for k in range(3)]

    def step(self, s, a, rng=None):
        k = self.states.index(s)
        return self.states[k + 1], (0.5, 1.0)[k], k + 1 == 2

    def is_terminal(self, s):
        return s is self.states[2]

    def check_action(self, a):
        pass


def test_rollout_discounted_sum():
    env = TwoStepChain()
    q = zero_q(env)
    rng = np.random.default_rng(0)
    assert rollout(env, env.states[0], q, 0.0, 10, 0.8, rng) == pytest.approx(1.3)


def test_rollout_from_terminal_is_zero():
    env = TwoStepChain()
    assert rollout(env, env.states[2], zero_q(env), 0.0, 10, 0.8, None) == 0.0


def test_rollout_respects_cap():
    env = TwoStepChain()
    assert rollout(env, env.states[0], zero_q(env), 0.0, 1, 0.8, None) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rollout(env, env.states[0], zero_q(env), 0.0, 0, 0.8, None)


def test_rollout_uniform_first_step_distribution(coopnav):
    # eps = 1, gamma = 0: return is the reward of one uniformly random move
    s = coopnav.state_from_positions([(1, 1), (2, 2), (0, 0)])
    q = zero_q(coopnav)
    expected = np.mean([coopnav.step(s, a)[1] for a in range(125)])
    rng = np.random.default_rng(5)
    draws = [rollout(coopnav, s, q, 1.0, 1, 0.0, rng) for _ in range(4000)]
    per_action = np.array([coopnav.step(s, a)[1] for a in range(125)])
    sigma = per_action.std() / math.sqrt(len(draws))
    assert abs(np.mean(draws) - expected) <= 4 * sigma


def test_rollout_absorbing_goal_adds_tail(coopnav):
    # one robot a single step from its target, the rest already there
    s = coopnav.state_from_positions([(1, 3), (3, 0), (3, 3)])
    q = zero_q(coopnav)
    q.table_[s.key] = np.zeros(125)
    q.table_[s.key][joint_action_index((UP, NOOP, NOOP))] = 1.0
    ret = rollout(coopnav, s, q, 0.0, 5, 0.8, np.random.default_rng(0))
    assert ret == pytest.approx(1.0 / (1 - 0.8))


# ---------------------------------------------------------------- search


def test_lambda_schedule_monotone_and_capped():
    values = [lambda_schedule(0.5, i) for i in range(20)]
    assert values[0] == 0.5
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert max(values) == 0.9


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(horizon=0)
    with pytest.raises(ValueError):
        SearchConfig(mode="greedy")
    with pytest.raises(ValueError):
        SearchConfig(eps_rollout=1.5)


def test_search_rejects_terminal_root(coopnav):
    goal = coopnav.make_state(coopnav.targets)
    with pytest.raises(ValueError):
        uct_search(goal, zero_q(coopnav), SearchConfig(), coopnav)


def test_depth_one_vanilla_visits_all_actions_equally(bandit):
    cfg = SearchConfig(horizon=1, n_sim=4, mode="vanilla", p_noise=0.0, mc_backup=False,
                       n_rollouts=0)
    result = uct_search(bandit.root, zero_q(bandit), cfg, bandit, rng=0)
    assert list(result.root.counts) == [2, 2]
    assert result.best_action == 0


def test_depth_one_with_backup_prefers_better_arm(bandit):
    # the final choice still carries the bonus, so it needs enough episodes
    cfg = SearchConfig(horizon=1, n_sim=200, mode="vanilla", p_noise=0.0, mc_backup=True)
    result = uct_search(bandit.root, zero_q(bandit), cfg, bandit, rng=0)
    assert result.best_action == 1
    assert result.root.counts[1] > result.root.counts[0]


def test_random_expands_one_action_vanilla_all(coopnav):
    s = coopnav.state_from_positions([(1, 1), (2, 2), (0, 0)])
    q = zero_q(coopnav)
    sizes = {}
    for mode in ("random", "vanilla"):
        cfg = SearchConfig(horizon=1, n_sim=1, mode=mode, p_noise=0.0, n_rollouts=0)
        result = uct_search(s, q, cfg, coopnav, ExplorationLedger(), rng=0)
        sizes[mode] = result.n_expanded
    assert sizes == {"random": 1, "vanilla": 125}


def test_random_ledger_never_exceeds_vanilla():
    env = CoopNavEnv()
    q = NeuralQ(125, 16, random_state=0).initialize(96, 125)
    for seed in range(5):
        s = env.sample_initial_state(np.random.default_rng(seed))
        counts = {}
        for mode in ("random", "vanilla"):
            ledger = ExplorationLedger()
            cfg = SearchConfig(mode=mode, n_sim=8, n_rollouts=0)
            uct_search(s, q, cfg, env, ledger, rng=seed)
            counts[mode] = ledger.total
        assert counts["random"] <= counts["vanilla"]


def test_best_action_one_step_from_goal(coopnav):
    s = coopnav.state_from_positions([(1, 3), (3, 0), (3, 3)])
    move = joint_action_index((UP, NOOP, NOOP))
    cfg = SearchConfig(horizon=1, n_sim=250, mode="vanilla", p_noise=0.0, n_rollouts=1)
    result = uct_search(s, zero_q(coopnav), cfg, coopnav, rng=0)
    # every action that leaves the other robots in place and moves robot 0 up wins
    s2, r, _ = coopnav.step(s, result.best_action)
    assert r == 1.0
    assert coopnav.step(s, move)[1] == 1.0


def test_visit_accounting_and_transition_yield(coopnav):
    q = NeuralQ(125, 16, random_state=1).initialize(96, 125)
    rng = np.random.default_rng(7)
    for mode in ("dop", "vanilla", "random"):
        for _ in range(3):
            s = coopnav.sample_initial_state(rng)
            cfg = SearchConfig(mode=mode, n_sim=10)
            result = uct_search(s, q, cfg, coopnav, rng=rng)
            # deeper visits can return to the root state (tree nodes are per state)
            assert result.root.counts.sum() == result.root.total >= cfg.n_sim
            shallow = uct_search(s, q, SearchConfig(mode=mode, n_sim=10, horizon=1),
                                 coopnav, rng=rng)
            assert shallow.root.counts.sum() == shallow.root.total == 10
            ts = result.transitions
            assert ts[0].s == s
            assert len(ts) == cfg.horizon or ts[-1].terminal
            for a, b in zip(ts, ts[1:]):
                assert a.s_next == b.s
            assert 0 <= result.best_action < 125


def test_dop_search_respects_admissible_sets(coopnav):
    q = NeuralQ(125, 16, random_state=2).initialize(96, 125)
    s = coopnav.sample_initial_state(np.random.default_rng(0))
    cfg = SearchConfig(mode="dop", lam=1.0, eps_admissible=0.0, n_sim=16)
    result = uct_search(s, q, cfg, coopnav, rng=0)
    assert set(np.flatnonzero(result.root.counts)) == {int(np.argmax(q.q_values(s)))}


def test_search_is_reproducible(coopnav):
    q = NeuralQ(125, 16, random_state=3).initialize(96, 125)
    s = coopnav.sample_initial_state(np.random.default_rng(1))

    def once():
        ledger = ExplorationLedger()
        r = uct_search(s, q, SearchConfig(n_sim=12), coopnav, ledger, rng=9)
        return r.best_action, [(t.s.key, t.a, t.r) for t in r.transitions], ledger.total

    assert once() == once()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["dop", "vanilla", "random"]))
def test_ledger_is_monotone_across_searches(seed, mode):
    env = CoopNavEnv()
    q = TabularQ(125).initialize(96, 125)
    rng = np.random.default_rng(seed)
    ledger = ExplorationLedger()
    last = 0
    for _ in range(3):
        s = env.sample_initial_state(rng)
        uct_search(s, q, SearchConfig(mode=mode, n_sim=3, n_rollouts=1, rollout_cap=3), env,
                   ledger, rng)
        assert ledger.total >= last
        last = ledger.total
    new = ledger.close_iteration()
    assert new == ledger.total


def test_ledger_counts_new_states_per_iteration():
    ledger = ExplorationLedger()
    ledger.add(b"a")
    ledger.add(b"b", "rollout")
    assert ledger.close_iteration() == 2
    ledger.add(b"a")
    ledger.add(b"c")
    assert ledger.close_iteration() == 1
    assert ledger.per_iteration_new == [2, 1]
    assert ledger.per_iteration_split == [(1, 1), (2, 1)]
