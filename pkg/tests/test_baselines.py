import numpy as np
import pytest

from dop.agent import make_q
from dop.baselines import (
    DqnConfig,
    DQNAgent,
    ReplayBuffer,
    TdSearchConfig,
    TDSearchAgent,
    linear_epsilon,
    run_dqn,
    run_td_search,
)
from dop.envs import CoopNavEnv, GridWorld1, bfs_shortest_path
from dop.mdp import StateId, Transition
from dop.qfunc import TabularQ
from dop.search import rollout


def _t(k):
    return Transition(StateId([float(k)]), 0, StateId([float(k + 1)]), 0.0)


def test_buffer_is_fifo_and_bounded():
    buf = ReplayBuffer(3)
    items = [_t(k) for k in range(5)]
    for t in items:
        buf.push(t)
        assert len(buf) <= 3
    assert list(buf) == items[2:]


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(10)
    items = [_t(k) for k in range(10)]
    for t in items:
        buf.push(t)
    rng = np.random.default_rng(0)
    draws = 100_000
    index = {id(t): k for k, t in enumerate(items)}
    counts = np.bincount([index[id(t)] for t in buf.sample(draws, rng)], minlength=10)
    sigma = np.sqrt(draws * 0.1 * 0.9)
    assert np.all(np.abs(counts - draws / 10) <= 3 * sigma)


def test_buffer_rejects_bad_use():
    with pytest.raises(ValueError):
        ReplayBuffer(0)
    with pytest.raises(ValueError):
        ReplayBuffer(2).sample(1, np.random.default_rng(0))


def test_linear_epsilon_schedule():
    sched = linear_epsilon(1.0, 0.1, 10)
    assert sched(0) == 1.0
    assert sched(9) == pytest.approx(0.1)
    assert sched(50) == pytest.approx(0.1)


def test_dqn_config_requires_room_for_a_batch():
    with pytest.raises(ValueError):
        DqnConfig(capacity=8, batch_size=32)


class RecordingTabularQ(TabularQ):
    def train_batch(self, batch, targets, alpha):
        self.batches = getattr(self, "batches", []) + [list(batch)]
        return super().train_batch(batch, targets, alpha)


def test_dqn_capacity_one_trains_on_latest_transition():
    env = GridWorld1()
    q = RecordingTabularQ(5)
    cfg = DqnConfig(n_iterations=1, episodes_per_iteration=2, episode_length=5, capacity=32,
                    batch_size=32)
    buffer = ReplayBuffer(1)
    seen = []
    original = buffer.push

    def push(t):
        seen.append(t)
        original(t)

    buffer.push = push
    run_dqn(env, q, cfg, rng=0, buffer=buffer)
    assert [b for b in q.batches] == [[t] for t in seen]


def test_dqn_full_exploration_acts_uniformly():
    env = CoopNavEnv()
    q = make_q("tabular", env)
    cfg = DqnConfig(n_iterations=1, episodes_per_iteration=2000, episode_length=1)
    buffer = ReplayBuffer(10_000)
    _, records, _ = run_dqn(env, q, cfg, rng=1, eps_schedule=lambda i: 1.0, buffer=buffer)
    assert records[0].dataset_size == 2000
    # commanded actions are uniform over the joint space; check robot 0's primitive
    counts = np.bincount([t.a // 25 for t in buffer], minlength=5)
    sigma = np.sqrt(2000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 400) <= 3 * sigma)


def test_dqn_solves_gridworld():
    env = GridWorld1()
    # 10 x 50 = 500 episodes
    agent = DQNAgent(n_iterations=10, episodes_per_iteration=50, episode_length=20,
                     random_state=0).fit(env)
    optimal = 0
    for r in range(4):
        for c in range(4):
            if (r, c) == (3, 3):
                continue
            s = env.state_from_positions((r, c))
            steps, best = 0, bfs_shortest_path((4, 4), (r, c), (3, 3))
            while not env.is_terminal(s) and steps <= best:
                s, _, _ = env.step(s, agent.policy_(s))
                steps += 1
            optimal += steps == best
    assert optimal >= 0.8 * 15


def test_dqn_neural_records(coopnav):
    agent = DQNAgent(n_iterations=2, episodes_per_iteration=3, random_state=0).fit(coopnav)
    assert [r.iteration for r in agent.records_] == [1, 2]
    totals = [r.explored_total for r in agent.records_]
    assert totals[1] >= totals[0]
    assert agent.predict(np.zeros((2, 96))).shape == (2,)


# ---------------------------------------------------------------- TD-search


def test_td_search_without_simulations_is_greedy(coopnav):
    q = make_q("neural", coopnav, seed=0).initialize(96, 125)
    s = coopnav.sample_initial_state(np.random.default_rng(0))
    before = q.get_flat_params().copy()
    a = run_td_search(coopnav, q, TdSearchConfig(n_simulations=0), s, rng=0)
    assert a == q.greedy_action(s)
    assert np.array_equal(before, q.get_flat_params())


def test_td_search_greedy_simulations_repeat_one_path(coopnav):
    env = GridWorld1()
    q = TabularQ(5).initialize(env.encoding_size, 5)
    s = env.state_from_positions((0, 0))
    paths = []
    for _ in range(3):
        collected = []
        run_td_search(env, q, TdSearchConfig(n_simulations=1, eps=0.0, p_noise=0.0, depth=5),
                      s, rng=0, collect=collected)
        paths.append([(t.s.key, t.a) for t in collected])
    # all-zero Q picks action 0 (stay) at every step
    assert paths[0] == paths[1] == paths[2]
    assert all(a == 0 for _, a in paths[0])


def test_td_search_bandit_picks_better_arm(bandit):
    q = TabularQ(2).initialize(bandit.encoding_size, 2)
    cfg = TdSearchConfig(n_simulations=100, eps=0.3, p_noise=0.0, alpha=0.5)
    assert run_td_search(bandit, q, cfg, bandit.root, rng=0) == 1
    # fixed point of the TD update on a one-step bandit is the arm reward
    assert q.q_values(bandit.root)[1] == pytest.approx(0.8, abs=1e-6)


def test_td_search_reuses_rollout_trajectories(coopnav):
    s = coopnav.sample_initial_state(np.random.default_rng(3))
    q1 = make_q("tabular", coopnav).initialize(96, 125)
    q2 = make_q("tabular", coopnav).initialize(96, 125)
    collected = []
    run_td_search(coopnav, q1, TdSearchConfig(n_simulations=1, eps=1.0, depth=6), s,
                  rng=np.random.default_rng(42), collect=collected)
    reference = []
    rollout(coopnav, s, q2, 1.0, 6, 0.8, np.random.default_rng(42), 0.05, collect=reference)
    assert [(t.s.key, t.a, t.s_next.key) for t in collected] == \
        [(t.s.key, t.a, t.s_next.key) for t in reference]


def test_td_search_rejects_terminal_root(coopnav):
    goal = coopnav.make_state(coopnav.targets)
    with pytest.raises(ValueError):
        run_td_search(coopnav, TabularQ(125).initialize(96, 125), TdSearchConfig(), goal)


def test_td_search_agent_records():
    agent = TDSearchAgent(q="tabular", n_iterations=2, timesteps=2, n_simulations=2,
                          random_state=0).fit(GridWorld1())
    assert len(agent.records_) == 2
    assert agent.records_[1].dataset_size >= agent.records_[0].dataset_size > 0
