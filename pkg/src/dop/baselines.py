"""Learning baselines: DQN-lite with a replay buffer, and TD-search.

Both reuse the Q-functions, the TD target and the greedy evaluation of the
planner, so that comparisons isolate how experience is gathered.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .agent import PolicySnapshot, RunRecord, ensure_initialized, evaluate_policy, make_q
from .mdp import stochastic_step
from .qfunc import batch_targets, td_target
from .search import ExplorationLedger, rollout


class ReplayBuffer:
    """Fixed-capacity FIFO store with uniform sampling (with replacement)."""

    def __init__(self, capacity=10_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = deque(maxlen=capacity)

    def push(self, transition):
        self._items.append(transition)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def sample(self, n, rng):
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


def linear_epsilon(start=1.0, end=0.1, n_iterations=10):
    """Epsilon decaying linearly from ``start`` to ``end`` over the iterations."""
    def schedule(i):
        if n_iterations <= 1:
            return end
        return start + (end - start) * min(i, n_iterations - 1) / (n_iterations - 1)
    return schedule


def _epsilon_greedy(q, state, eps, n, rng):
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(n))
    return q.greedy_action(state)


@dataclass
class DqnConfig:
    n_iterations: int = 10
    episodes_per_iteration: int = 4
    episode_length: int = 10
    eps_start: float = 1.0
    eps_end: float = 0.1
    gamma: float = 0.8
    alpha: float | None = None
    batch_size: int = 32
    capacity: int = 10_000
    p_noise: float = 0.05
    eval_horizon: int = 10
    n_eval: int = 5

    def __post_init__(self):
        if self.capacity < self.batch_size:
            raise ValueError("buffer capacity must be >= batch size")
        if min(self.n_iterations, self.episodes_per_iteration, self.episode_length) < 1:
            raise ValueError("iteration, episode and length counts must be >= 1")


def run_dqn(env, q, cfg: DqnConfig, rng=None, run=0, eps_schedule=None, buffer=None):
    """Epsilon-greedy Q-learning from a replay buffer, without a target network.

    After every environment step, once the buffer holds at least
    ``batch_size`` transitions, one uniformly sampled mini-batch is used for a
    gradient step. Returns ``(policy, records, ledger)`` with one record per
    iteration of ``episodes_per_iteration`` episodes.
    """
    rng = np.random.default_rng(rng)
    ensure_initialized(q, env)
    eval_seeds = [int(x) for x in rng.integers(2**31, size=cfg.n_eval)]
    eps_schedule = eps_schedule or linear_epsilon(cfg.eps_start, cfg.eps_end, cfg.n_iterations)
    buffer = ReplayBuffer(cfg.capacity) if buffer is None else buffer
    if buffer.capacity < cfg.batch_size and buffer.capacity != 1:
        raise ValueError("buffer capacity must be >= batch size")
    batch_size = min(cfg.batch_size, buffer.capacity)
    alpha = q.learning_rate if cfg.alpha is None else cfg.alpha
    ledger = ExplorationLedger()
    absorbing = env.absorbing_terminal
    records = []
    for i in range(cfg.n_iterations):
        start = time.perf_counter()
        eps = eps_schedule(i)
        for _ in range(cfg.episodes_per_iteration):
            s = env.sample_initial_state(rng)
            ledger.add(s.key)
            for _ in range(cfg.episode_length):
                a = _epsilon_greedy(q, s, eps, env.n_actions, rng)
                t = stochastic_step(env, s, a, cfg.p_noise, rng)
                ledger.add(t.s_next.key)
                buffer.push(t)
                if len(buffer) >= batch_size:
                    batch = buffer.sample(batch_size, rng)
                    q.train_batch(batch, batch_targets(q, batch, cfg.gamma, absorbing), alpha)
                if t.terminal:
                    break
                s = t.s_next
        reward = evaluate_policy(env, PolicySnapshot(q), cfg.eval_horizon, eval_seeds, cfg.p_noise)
        new = ledger.close_iteration()
        elapsed = int(round((time.perf_counter() - start) * 1000))
        records.append(RunRecord(i + 1, run, reward, ledger.total, new, len(buffer), elapsed))
    return PolicySnapshot(q), records, ledger


@dataclass
class TdSearchConfig:
    n_simulations: int = 32
    eps: float = 0.2
    gamma: float = 0.8
    alpha: float | None = None
    depth: int = 20
    p_noise: float = 0.05

    def __post_init__(self):
        if self.n_simulations < 0:
            raise ValueError("n_simulations must be >= 0")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        for name in ("eps", "p_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")


def run_td_search(env, q, cfg: TdSearchConfig, root, rng=None, ledger=None, collect=None):
    """Epsilon-greedy simulations from ``root`` with a TD(0) update after every step.

    Returns the greedy root action under the updated Q-function. Simulated
    transitions are appended to ``collect`` when given.
    """
    if env.is_terminal(root):
        raise ValueError("search root is terminal")
    rng = np.random.default_rng(rng)
    absorbing = env.absorbing_terminal
    alpha = q.learning_rate if cfg.alpha is None else cfg.alpha

    def update(t):
        q.train_batch([t], np.array([td_target(t, q, cfg.gamma, absorbing)]), alpha)

    for _ in range(cfg.n_simulations):
        rollout(env, root, q, cfg.eps, cfg.depth, cfg.gamma, rng, cfg.p_noise,
                ledger=ledger, collect=collect, on_step=update)
    return q.greedy_action(root)


def run_td_search_agent(env, q, cfg: TdSearchConfig, n_iterations=10, timesteps=10,
                        n_eval=5, rng=None, run=0):
    """Outer loop matching the planner's: act greedily, search at every visited state."""
    rng = np.random.default_rng(rng)
    ensure_initialized(q, env)
    eval_seeds = [int(x) for x in rng.integers(2**31, size=n_eval)]
    ledger = ExplorationLedger()
    records = []
    n_updates = 0
    for i in range(n_iterations):
        start = time.perf_counter()
        s = env.sample_initial_state(rng)
        ledger.add(s.key)
        for _ in range(timesteps):
            t = stochastic_step(env, s, q.greedy_action(s), cfg.p_noise, rng)
            ledger.add(t.s_next.key)
            s = env.sample_initial_state(rng) if t.terminal else t.s_next
            ledger.add(s.key)
            simulated = []
            run_td_search(env, q, cfg, s, rng, ledger, simulated)
            n_updates += len(simulated)
        reward = evaluate_policy(env, PolicySnapshot(q), timesteps, eval_seeds, cfg.p_noise)
        new = ledger.close_iteration()
        elapsed = int(round((time.perf_counter() - start) * 1000))
        records.append(RunRecord(i + 1, run, reward, ledger.total, new, n_updates, elapsed))
    return PolicySnapshot(q), records, ledger


class _AgentBase(BaseEstimator):
    def predict(self, X):
        check_is_fitted(self, "q_")
        X = check_array(X, dtype=np.float64)
        return np.argmax(self.q_.predict(X), axis=1)


class DQNAgent(_AgentBase):
    """Estimator wrapper around :func:`run_dqn`."""

    def __init__(self, q="neural", n_iterations=10, episodes_per_iteration=4,
                 episode_length=10, eps_start=1.0, eps_end=0.1, gamma=0.8,
                 learning_rate=None, batch_size=32, capacity=10_000, hidden_width=64,
                 p_noise=0.05, eval_horizon=10, n_eval=5, random_state=None):
        self.q = q
        self.n_iterations = n_iterations
        self.episodes_per_iteration = episodes_per_iteration
        self.episode_length = episode_length
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.capacity = capacity
        self.hidden_width = hidden_width
        self.p_noise = p_noise
        self.eval_horizon = eval_horizon
        self.n_eval = n_eval
        self.random_state = random_state

    def fit(self, env, y=None, run=0):
        cfg = DqnConfig(self.n_iterations, self.episodes_per_iteration, self.episode_length,
                        self.eps_start, self.eps_end, self.gamma, self.learning_rate,
                        self.batch_size, self.capacity, self.p_noise, self.eval_horizon,
                        self.n_eval)
        rng = np.random.default_rng(self.random_state)
        q = make_q(self.q, env, self.learning_rate, self.hidden_width, self.batch_size,
                   self.gamma, int(rng.integers(2**31)))
        self.policy_, self.records_, self.ledger_ = run_dqn(env, q, cfg, rng, run=run)
        self.q_ = q
        self.n_features_in_ = env.encoding_size
        return self


class TDSearchAgent(_AgentBase):
    """Estimator wrapper around :func:`run_td_search_agent`."""

    def __init__(self, q="neural", n_iterations=10, timesteps=10, n_simulations=32, eps=0.2,
                 depth=20, gamma=0.8, learning_rate=None, batch_size=32, hidden_width=64,
                 p_noise=0.05, n_eval=5, random_state=None):
        self.q = q
        self.n_iterations = n_iterations
        self.timesteps = timesteps
        self.n_simulations = n_simulations
        self.eps = eps
        self.depth = depth
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.hidden_width = hidden_width
        self.p_noise = p_noise
        self.n_eval = n_eval
        self.random_state = random_state

    def fit(self, env, y=None, run=0):
        cfg = TdSearchConfig(self.n_simulations, self.eps, self.gamma, self.learning_rate,
                             self.depth, self.p_noise)
        rng = np.random.default_rng(self.random_state)
        q = make_q(self.q, env, self.learning_rate, self.hidden_width, self.batch_size,
                   self.gamma, int(rng.integers(2**31)))
        self.policy_, self.records_, self.ledger_ = run_td_search_agent(
            env, q, cfg, self.n_iterations, self.timesteps, self.n_eval, rng, run)
        self.q_ = q
        self.n_features_in_ = env.encoding_size
        return self
