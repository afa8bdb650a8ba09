"""The outer planning-and-learning loop and greedy policy evaluation."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .mdp import stochastic_step
from .qfunc import AggregatedDataset, NeuralQ, TabularQ, train_epoch
from .search import ExplorationLedger, SearchConfig, lambda_schedule, uct_search


@dataclass
class RunRecord:
    iteration: int
    run: int
    cumulative_reward: float
    explored_total: int
    explored_new: int
    dataset_size: int
    wall_time_ms: int


@dataclass
class DopConfig:
    n_iterations: int = 10
    timesteps: int = 10
    gamma: float = 0.8
    alpha: float | None = None  # None: the Q-function's own learning rate
    lambda0: float = 0.5
    lambda_step: float = 0.05
    lambda_cap: float = 0.9
    batch_size: int = 32
    epochs_per_update: int = 1
    n_eval: int = 5
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        if self.n_iterations < 1 or self.timesteps < 1:
            raise ValueError("n_iterations and timesteps must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epochs_per_update < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_update and batch_size must be >= 1")


class PolicySnapshot:
    """Frozen copy of a Q-function acting greedily (ties to the lowest index)."""

    def __init__(self, q):
        self.q = copy.deepcopy(q)

    def __call__(self, state) -> int:
        return self.q.greedy_action(state)

    def predict(self, X):
        return np.argmax(self.q.predict(X), axis=1)


@dataclass
class RunResult:
    policy: PolicySnapshot
    records: list
    dataset: AggregatedDataset
    ledger: ExplorationLedger
    lambdas: list


def make_q(kind, env, learning_rate=None, hidden_width=64, batch_size=32, gamma=0.8,
           seed=None, xi=0.0):
    """Q-function by name; ``learning_rate=None`` keeps the class default
    (Adam step 1e-3 for the network, 0.15 for the table)."""
    extra = {} if learning_rate is None else {"learning_rate": learning_rate}
    if kind == "neural":
        return NeuralQ(env.n_actions, hidden_width, batch_size=batch_size, gamma=gamma,
                       random_state=seed, **extra)
    if kind == "tabular":
        return TabularQ(env.n_actions, batch_size=batch_size, gamma=gamma, xi=xi, **extra)
    if hasattr(kind, "q_values"):
        return copy.deepcopy(kind)
    raise ValueError(f"unknown Q-function {kind!r}; use 'neural', 'tabular' or an instance")


def ensure_initialized(q, env):
    if not hasattr(q, "n_features_in_"):
        q.initialize(env.encoding_size, env.n_actions)
    if q.n_actions != env.n_actions:
        raise ValueError(f"Q-function has {q.n_actions} actions, environment {env.n_actions}")
    return q


def evaluate_policy(env, policy, horizon, seeds, p_noise=0.05, start=None):
    """Mean undiscounted cumulative reward of ``policy`` over ``seeds``.

    Each episode runs for ``horizon`` steps from ``start`` (default: the
    environment's evaluation state) under noisy dynamics. On an absorbing
    terminal state the remaining steps keep paying its reward; otherwise the
    episode stops there. A start state that is already terminal and not
    absorbing contributes its reward once.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one evaluation seed")
    s0 = env.evaluation_state() if start is None else start
    totals = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        s = s0
        total = 0.0
        if env.is_terminal(s):
            r = env.reward(s)
            totals.append(r * horizon if env.absorbing_terminal else r)
            continue
        for k in range(horizon):
            t = stochastic_step(env, s, policy(s), p_noise, rng)
            total += t.r
            if t.terminal:
                if env.absorbing_terminal:
                    total += t.r * (horizon - k - 1)
                break
            s = t.s_next
        totals.append(total)
    return float(np.mean(totals))


def run_dop(env, q, cfg: DopConfig, rng=None, run=0, checkpoint_hook=None) -> RunResult:
    """Iterate: execute the greedy policy, search from each visited state,
    aggregate the search transitions and retrain the Q-function."""
    rng = np.random.default_rng(rng)
    ensure_initialized(q, env)
    eval_seeds = [int(x) for x in rng.integers(2**31, size=cfg.n_eval)]
    data = AggregatedDataset()
    ledger = ExplorationLedger()
    records, lambdas = [], []
    p_noise = cfg.search.p_noise
    absorbing = env.absorbing_terminal
    for i in range(cfg.n_iterations):
        start = time.perf_counter()
        lam = lambda_schedule(cfg.lambda0, i, cfg.lambda_step, cfg.lambda_cap)
        lambdas.append(lam)
        scfg = replace(cfg.search, lam=lam, gamma=cfg.gamma)
        s = env.sample_initial_state(rng)
        ledger.add(s.key)
        for _ in range(cfg.timesteps):
            t = stochastic_step(env, s, q.greedy_action(s), p_noise, rng)
            ledger.add(t.s_next.key)
            s = t.s_next
            if t.terminal:
                s = env.sample_initial_state(rng)
                ledger.add(s.key)
            result = uct_search(s, q, scfg, env, ledger, rng)
            data.add(result.transitions)
            for _ in range(cfg.epochs_per_update):
                train_epoch(q, data, cfg.gamma, cfg.alpha, cfg.batch_size, rng, absorbing)
        data.close_iteration()
        policy = PolicySnapshot(q)
        reward = evaluate_policy(env, policy, cfg.timesteps, eval_seeds, p_noise)
        explored_new = ledger.close_iteration()
        elapsed = int(round((time.perf_counter() - start) * 1000))
        records.append(RunRecord(i + 1, run, reward, ledger.total, explored_new, len(data), elapsed))
        if checkpoint_hook is not None:
            checkpoint_hook(q, i + 1)
    return RunResult(PolicySnapshot(q), records, data, ledger, lambdas)


class DOPPlanner(BaseEstimator):
    """Estimator wrapper around :func:`run_dop`.

    ``fit(env)`` learns a Q-function by planning in ``env``; ``predict(X)``
    returns greedy actions for rows of state encodings.
    """

    def __init__(self, q="neural", mode="dop", n_iterations=10, timesteps=10, gamma=0.8,
                 learning_rate=None, lambda0=0.5, horizon=4, n_rollouts=3, c=0.7,
                 eps_admissible=0.3, eps_rollout=0.2, xi=0.0, rollout_cap=20, n_sim=32,
                 p_noise=0.05, batch_size=32, hidden_width=64, epochs_per_update=1,
                 mc_backup=True, n_eval=5, random_state=None):
        self.q = q
        self.mode = mode
        self.n_iterations = n_iterations
        self.timesteps = timesteps
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.lambda0 = lambda0
        self.horizon = horizon
        self.n_rollouts = n_rollouts
        self.c = c
        self.eps_admissible = eps_admissible
        self.eps_rollout = eps_rollout
        self.xi = xi
        self.rollout_cap = rollout_cap
        self.n_sim = n_sim
        self.p_noise = p_noise
        self.batch_size = batch_size
        self.hidden_width = hidden_width
        self.epochs_per_update = epochs_per_update
        self.mc_backup = mc_backup
        self.n_eval = n_eval
        self.random_state = random_state

    def _make_config(self):
        search = SearchConfig(
            horizon=self.horizon, n_rollouts=self.n_rollouts, c=self.c, lam=self.lambda0,
            eps_admissible=self.eps_admissible, eps_rollout=self.eps_rollout, xi=self.xi,
            rollout_cap=self.rollout_cap, n_sim=self.n_sim, mode=self.mode,
            p_noise=self.p_noise, gamma=self.gamma, mc_backup=self.mc_backup,
        )
        return DopConfig(
            n_iterations=self.n_iterations, timesteps=self.timesteps, gamma=self.gamma,
            alpha=self.learning_rate, lambda0=self.lambda0, batch_size=self.batch_size,
            epochs_per_update=self.epochs_per_update, n_eval=self.n_eval, search=search,
        )

    def _make_q(self, env, seed):
        return make_q(self.q, env, self.learning_rate, self.hidden_width, self.batch_size,
                      self.gamma, seed, self.xi)

    def fit(self, env, y=None, run=0, checkpoint_hook=None):
        cfg = self._make_config()
        rng = np.random.default_rng(self.random_state)
        q_seed = int(rng.integers(2**31))
        q = self._make_q(env, q_seed)
        result = run_dop(env, q, cfg, rng, run=run, checkpoint_hook=checkpoint_hook)
        self.q_ = q
        self.policy_ = result.policy
        self.records_ = result.records
        self.dataset_ = result.dataset
        self.ledger_ = result.ledger
        self.lambdas_ = result.lambdas
        self.n_features_in_ = env.encoding_size
        return self

    def predict(self, X):
        check_is_fitted(self, "q_")
        X = check_array(X, dtype=np.float64)
        return np.argmax(self.q_.predict(X), axis=1)
