"""Q-pruned UCT search with vanilla and random expansion baselines.

One :func:`uct_search` call builds a fresh tree rooted at a state. Each
search episode descends ``horizon`` levels; at every node the candidate
actions are

* ``dop``: the admissible set derived from the Q-function,
* ``vanilla``: every action,
* ``random``: a single action, drawn uniformly when the node is first
  expanded and kept for the rest of the search.

Candidates not yet tried at a node are expanded (simulated once and
recorded in the exploration ledger). The UCB rule then picks one candidate
to descend through, and every newly created node on the descent is
evaluated with ``n_rollouts`` epsilon-greedy roll-outs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .mdp import StateId, encoding_key, stochastic_step

MODES = ("dop", "vanilla", "random")


@dataclass
class SearchConfig:
    horizon: int = 4
    n_rollouts: int = 3
    c: float = 0.7
    lam: float = 0.5
    eps_admissible: float = 0.3
    eps_rollout: float = 0.2
    xi: float = 0.0
    rollout_cap: int = 20
    n_sim: int = 32
    mode: str = "dop"
    p_noise: float = 0.05
    gamma: float = 0.8
    mc_backup: bool = True
    rollouts_to_dataset: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_rollouts < 0 or self.n_sim < 0:
            raise ValueError("n_rollouts and n_sim must be >= 0")
        if self.rollout_cap < 1:
            raise ValueError("rollout_cap must be >= 1")
        if self.c < 0:
            raise ValueError("c must be >= 0")
        for name in ("lam", "eps_admissible", "eps_rollout", "p_noise"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.xi < 0:
            raise ValueError("xi must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def lambda_schedule(lam0: float, iteration: int, step: float = 0.05, cap: float = 0.9) -> float:
    """Admissibility multiplier for outer iteration ``iteration`` (0-based)."""
    return min(cap, lam0 + step * iteration)


class ExplorationLedger:
    """Distinct canonical state keys touched by search, roll-outs and execution."""

    def __init__(self):
        self.tree = set()
        self.rollout = set()
        self.seen = set()
        self.per_iteration_new = []
        self.per_iteration_split = []
        self._mark = 0

    def add(self, key, kind="tree"):
        (self.rollout if kind == "rollout" else self.tree).add(key)
        self.seen.add(key)

    def __len__(self):
        return len(self.seen)

    @property
    def total(self):
        return len(self.seen)

    def close_iteration(self):
        """Record and return the number of states first seen since the last call."""
        new = len(self.seen) - self._mark
        self._mark = len(self.seen)
        self.per_iteration_new.append(new)
        self.per_iteration_split.append((len(self.tree), len(self.rollout)))
        return new

    def merge(self, other):
        self.tree |= other.tree
        self.rollout |= other.rollout
        self.seen |= other.seen
        return self


class SearchNode:
    """Per-state statistics inside one search tree."""

    __slots__ = ("state", "counts", "total", "children", "depth", "value_sum")

    def __init__(self, state, n_actions, depth=0):
        self.state = state
        self.counts = np.zeros(n_actions, dtype=np.int64)
        self.total = 0
        self.children = {}
        self.depth = depth
        self.value_sum = np.zeros(n_actions)

    def values(self, q_values, mc_backup=False):
        """Selection values: Q itself, or Q blended with backed-up mean returns."""
        if not mc_backup:
            return q_values
        return (q_values + self.value_sum) / (1.0 + self.counts)


def admissible_actions(q_values, lam, eps_admissible, rng):
    """Sorted admissible action indices for one node.

    Keeps actions whose value reaches ``lam`` times the maximum (only the
    argmax set when the maximum is negative) and, with probability
    ``eps_admissible``, adds one uniformly drawn action.
    """
    q = np.asarray(q_values, dtype=float)
    if q.size == 0:
        raise ValueError("q_values must be non-empty")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    best = q.max()
    if best >= 0:
        chosen = set(np.flatnonzero(q >= lam * best).tolist())
    else:
        chosen = set(np.flatnonzero(q == best).tolist())
    if eps_admissible > 0 and rng.random() < eps_admissible:
        chosen.add(int(rng.integers(q.size)))
    return sorted(chosen)


def exploration_bonus(c, total_visits, visits):
    """``c * sqrt(log(total) / visits)``; infinite when unvisited, 0 when total <= 1."""
    if visits == 0:
        return math.inf
    if total_visits <= 1:
        return 0.0
    return c * math.sqrt(math.log(total_visits) / visits)


def ucb_scores(values, counts, total, c, actions):
    return [values[a] + exploration_bonus(c, total, counts[a]) for a in actions]


def ucb_select(node: SearchNode, values, c, admissible, record=True) -> int:
    """Highest value-plus-bonus action among ``admissible`` (lowest index on ties).

    Increments the visit count of the chosen action unless ``record`` is false.
    """
    actions = sorted(admissible)
    if not actions:
        raise ValueError("admissible set is empty")
    best_a, best_score = actions[0], -math.inf
    for a in actions:
        if node.counts[a] == 0:
            best_a = a
            break
        score = values[a] + exploration_bonus(c, node.total, node.counts[a])
        if score > best_score:
            best_a, best_score = a, score
    if record:
        node.counts[best_a] += 1
        node.total += 1
    return best_a


def rollout(env, state, q, eps, cap, gamma, rng, p_noise=0.0, ledger=None,
            collect=None, on_step=None):
    """Discounted return of an epsilon-greedy roll-out over ``q``.

    Stops at a terminal state or after ``cap`` steps. Terminal states of
    absorbing environments contribute their reward for the rest of time.
    ``on_step`` is called with every transition right after it is sampled,
    before the next action is chosen.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if env.is_terminal(state):
        return 0.0
    n = env.n_actions
    ret, disc = 0.0, 1.0
    s = state
    for _ in range(cap):
        if eps > 0 and rng.random() < eps:
            a = int(rng.integers(n))
        else:
            a = q.greedy_action(s)
        t = stochastic_step(env, s, a, p_noise, rng)
        ret += disc * t.r
        if ledger is not None:
            ledger.add(t.s_next.key, "rollout")
        if collect is not None:
            collect.append(t)
        if on_step is not None:
            on_step(t)
        disc *= gamma
        if t.terminal:
            if env.absorbing_terminal:
                ret += disc * t.r / (1.0 - gamma)
            break
        s = t.s_next
    return ret


@dataclass
class SearchResult:
    best_action: int
    transitions: list
    root: SearchNode
    n_nodes: int
    n_expanded: int


def _candidates(mode, node, q_values, n_actions, cfg, rng):
    if mode == "dop":
        return admissible_actions(q_values, cfg.lam, cfg.eps_admissible, rng)
    if mode == "vanilla":
        return range(n_actions)
    # random: each node keeps the single action drawn when it was first expanded
    if node.children:
        return list(node.children)
    return [int(rng.integers(n_actions))]


def uct_search(root_state: StateId, q, cfg: SearchConfig, env, ledger=None, rng=None) -> SearchResult:
    """Run ``cfg.n_sim`` search episodes from ``root_state``.

    Returns the root action maximizing value plus exploration bonus and the
    transitions of the final best path (at most ``horizon`` of them).
    """
    if env.is_terminal(root_state):
        raise ValueError("search root is terminal")
    rng = np.random.default_rng(rng)
    ledger = ExplorationLedger() if ledger is None else ledger
    n = env.n_actions
    gamma = cfg.gamma
    xi = cfg.xi

    def node_key(s):
        return s.key if xi == 0 else encoding_key(s.encoding, xi)

    root = SearchNode(root_state, n, 0)
    tree = {node_key(root_state): root}
    ledger.add(root_state.key, "tree")
    expanded = 0
    extra = []

    for _ in range(cfg.n_sim):
        node = root
        path = []
        leaf_value = None
        for h in range(cfg.horizon):
            if env.is_terminal(node.state):
                break
            qv = q.q_values(node.state)
            cands = _candidates(cfg.mode, node, qv, n, cfg, rng)
            for a in cands:
                if a not in node.children:
                    t = stochastic_step(env, node.state, a, cfg.p_noise, rng)
                    node.children[a] = t
                    ledger.add(t.s_next.key, "tree")
                    expanded += 1
            a = ucb_select(node, node.values(qv, cfg.mc_backup), cfg.c, cands)
            if node.counts[a] == 1:
                # first descent reuses the expansion outcome
                t = node.children[a]
            else:
                t = stochastic_step(env, node.state, a, cfg.p_noise, rng)
                ledger.add(t.s_next.key, "tree")
            path.append((node, a, t))
            key = node_key(t.s_next)
            child = tree.get(key)
            leaf_value = None
            if child is None:
                child = tree[key] = SearchNode(t.s_next, n, h + 1)
                returns = [
                    rollout(env, t.s_next, q, cfg.eps_rollout, cfg.rollout_cap, gamma, rng,
                            cfg.p_noise, ledger, extra if cfg.rollouts_to_dataset else None)
                    for _ in range(cfg.n_rollouts)
                ]
                if returns:
                    leaf_value = float(np.mean(returns))
            node = child
        if cfg.mc_backup and path:
            _backup(path, leaf_value, q, gamma, env.absorbing_terminal)

    best = _best_action(root, q.q_values(root_state), cfg)
    transitions = _best_path(root, tree, node_key, q, cfg, env, ledger, rng)
    if cfg.rollouts_to_dataset:
        transitions = transitions + extra
    return SearchResult(best, transitions, root, len(tree), expanded)


def _backup(path, leaf_value, q, gamma, absorbing):
    last = path[-1][2]
    if last.terminal:
        g = last.r / (1.0 - gamma) if absorbing else 0.0
    elif leaf_value is not None:
        g = leaf_value
    else:
        g = float(np.max(q.q_values(last.s_next)))
    for node, a, t in reversed(path):
        g = t.r + gamma * g
        node.value_sum[a] += g


def _best_action(node, q_values, cfg):
    visited = np.flatnonzero(node.counts > 0)
    if visited.size == 0:
        return int(np.argmax(q_values))
    values = node.values(q_values, cfg.mc_backup)
    scores = ucb_scores(values, node.counts, node.total, cfg.c, visited)
    return int(visited[int(np.argmax(scores))])


def _best_path(root, tree, node_key, q, cfg, env, ledger, rng):
    transitions = []
    s = root.state
    for _ in range(cfg.horizon):
        node = tree.get(node_key(s))
        qv = q.q_values(s)
        if node is not None and node.total > 0:
            a = _best_action(node, qv, cfg)
        else:
            a = int(np.argmax(qv))
        t = stochastic_step(env, s, a, cfg.p_noise, rng)
        ledger.add(t.s_next.key, "tree")
        transitions.append(t)
        if t.terminal:
            break
        s = t.s_next
    return transitions
