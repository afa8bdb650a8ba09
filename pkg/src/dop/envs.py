"""Grid environments and exact planning oracles.

``CoopNavEnv`` is the three-robot cooperative navigation task on a 4x4 grid;
``GridWorld1`` is its single-agent counterpart, small enough for exact value
iteration. ``ChainEnv`` is a tiny deterministic chain used by oracle tests.
"""

from __future__ import annotations

import itertools
from collections import deque
from functools import lru_cache

import numpy as np

from .mdp import ContractError, Environment, StateId

GRID = 4
N_CELLS = GRID * GRID
PRIMITIVES = ("noop", "up", "down", "right", "left")
# (drow, dcol) per primitive action
MOVES = ((0, 0), (-1, 0), (1, 0), (0, 1), (0, -1))

DEFAULT_TARGETS = ((0, 3), (3, 0), (3, 3))
DEFAULT_EVAL_START = ((3, 0), (0, 3), (0, 0))


def bfs_shortest_path(grid, start, goal) -> int:
    """Length of the shortest 4-connected path between two free cells.

    ``grid`` is either a ``(rows, cols)`` shape or a boolean array whose
    ``True`` entries are free. Returns ``-1`` if ``goal`` is unreachable.
    """
    if isinstance(grid, tuple) and len(grid) == 2 and all(isinstance(g, int) for g in grid):
        free = np.ones(grid, dtype=bool)
    else:
        free = np.asarray(grid, dtype=bool)
    rows, cols = free.shape
    start, goal = tuple(start), tuple(goal)
    for cell in (start, goal):
        if not (0 <= cell[0] < rows and 0 <= cell[1] < cols):
            raise ContractError(f"cell {cell} is off the {rows}x{cols} grid")
    if start == goal:
        return 0
    dist = {start: 0}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES[1:]:
            nxt = (r + dr, c + dc)
            if nxt in dist or not (0 <= nxt[0] < rows and 0 <= nxt[1] < cols):
                continue
            if not free[nxt]:
                continue
            dist[nxt] = dist[(r, c)] + 1
            if nxt == goal:
                return dist[nxt]
            queue.append(nxt)
    return -1


@lru_cache(maxsize=None)
def _distance_table() -> np.ndarray:
    table = np.zeros((N_CELLS, N_CELLS), dtype=np.int64)
    for a in range(N_CELLS):
        for b in range(N_CELLS):
            table[a, b] = bfs_shortest_path((GRID, GRID), divmod(a, GRID), divmod(b, GRID))
    return table


def _move(cell: int, primitive: int) -> int:
    r, c = divmod(cell, GRID)
    dr, dc = MOVES[primitive]
    nr, nc = r + dr, c + dc
    if 0 <= nr < GRID and 0 <= nc < GRID:
        return nr * GRID + nc
    return cell


def resolve_moves(cells, primitives):
    """Simultaneous moves with blocked-stay collision semantics.

    Off-grid moves stay put. Robots ending in the same cell, or swapping
    cells, are reverted to their start cell; reverting can cascade into
    robots that were following, so iterate to a fixed point.
    """
    n = len(cells)
    final = [_move(c, p) for c, p in zip(cells, primitives)]
    while True:
        blocked = [
            i for i in range(n)
            if final[i] != cells[i] and any(
                final[j] == final[i] or (final[j] == cells[i] and final[i] == cells[j])
                for j in range(n) if j != i
            )
        ]
        if not blocked:
            break
        for i in blocked:
            final[i] = cells[i]
    return tuple(final)


def joint_action_index(primitives) -> int:
    a0, a1, a2 = primitives
    return a0 * 25 + a1 * 5 + a2


def joint_action_primitives(index: int):
    return index // 25, (index // 5) % 5, index % 5


@lru_cache(maxsize=None)
def _placement_tables():
    placements = list(itertools.permutations(range(N_CELLS), 3))
    index = {p: k for k, p in enumerate(placements)}
    nxt = np.empty((len(placements), 125), dtype=np.int64)
    for k, p in enumerate(placements):
        for a in range(125):
            nxt[k, a] = index[resolve_moves(p, joint_action_primitives(a))]
    return placements, index, nxt


class GridWorldState(StateId):
    """Joint robot/target configuration with its 6-channel occupancy encoding."""

    __slots__ = ("robots", "targets", "placement")

    def __init__(self, robots, targets, placement=-1):
        enc = np.zeros((2 * len(robots), GRID, GRID))
        for ch, cell in enumerate(tuple(robots) + tuple(targets)):
            enc[ch, cell // GRID, cell % GRID] = 1.0
        super().__init__(enc)
        self.robots = tuple(robots)
        self.targets = tuple(targets)
        self.placement = placement

    def __repr__(self):
        cells = [divmod(c, GRID) for c in self.robots]
        return f"GridWorldState(robots={cells}, targets={[divmod(c, GRID) for c in self.targets]})"


def _as_cells(positions):
    cells = []
    for pos in positions:
        r, c = pos
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise ContractError(f"position {pos} is off the grid")
        cells.append(r * GRID + c)
    return tuple(cells)


class CoopNavEnv(Environment):
    """Three robots, each heading to its own target on a 4x4 grid.

    Joint action ``a0*25 + a1*5 + a2`` with primitives
    ``noop, up, down, right, left``. Reward is
    ``1 - sum(bfs distance to own target) / 18``; the goal is absorbing.
    """

    name = "coopnav"
    n_actions = 125
    n_robots = 3
    encoding_size = 6 * N_CELLS
    absorbing_terminal = True
    max_total_distance = 18

    def __init__(self, targets=DEFAULT_TARGETS, randomize_targets=False,
                 eval_start=DEFAULT_EVAL_START):
        self.targets = _as_cells(targets)
        if len(set(self.targets)) != 3:
            raise ContractError("targets must be three distinct cells")
        self.randomize_targets = bool(randomize_targets)
        self.eval_start = _as_cells(eval_start)
        self._placements, self._index, self._next = _placement_tables()
        self._dist = _distance_table()
        self._cache = {}

    def make_state(self, robots, targets=None) -> GridWorldState:
        """State from robot cells (flat indices) and optional target cells."""
        targets = self.targets if targets is None else tuple(targets)
        robots = tuple(robots)
        key = (robots, targets)
        st = self._cache.get(key)
        if st is None:
            if len(set(robots)) != len(robots):
                raise ContractError(f"robots overlap: {robots}")
            st = GridWorldState(robots, targets, self._index[robots])
            # with moving targets the state space is too large to memoize
            if targets == self.targets:
                self._cache[key] = st
        return st

    def state_from_positions(self, robots, targets=None) -> GridWorldState:
        return self.make_state(_as_cells(robots), None if targets is None else _as_cells(targets))

    def evaluation_state(self) -> GridWorldState:
        return self.make_state(self.eval_start)

    def sample_initial_state(self, rng):
        targets = self.targets
        if self.randomize_targets:
            targets = tuple(int(c) for c in rng.choice(N_CELLS, size=3, replace=False))
        while True:
            robots = tuple(int(c) for c in rng.choice(N_CELLS, size=3, replace=False))
            if robots != targets:
                return self.make_state(robots, targets)

    def distances(self, state):
        return [int(self._dist[r, t]) for r, t in zip(state.robots, state.targets)]

    def reward(self, state) -> float:
        total = sum(self.distances(state))
        return min(1.0, max(0.0, 1.0 - total / self.max_total_distance))

    def is_terminal(self, state) -> bool:
        return state.robots == state.targets

    def step(self, state, action, rng=None):
        if self.is_terminal(state):
            return state, 1.0, True
        nxt = self._next[state.placement, action]
        s_next = self.make_state(self._placements[nxt], state.targets)
        return s_next, self.reward(s_next), self.is_terminal(s_next)

    def states(self):
        """All states sharing the fixed target assignment."""
        return [self.make_state(p) for p in self._placements]


class GridWorld1(Environment):
    """Single agent on the 4x4 grid; same primitives and shaping as coopnav."""

    name = "gridworld1"
    n_actions = 5
    encoding_size = 2 * N_CELLS
    absorbing_terminal = True
    max_total_distance = 6

    def __init__(self, target=(3, 3), eval_start=(0, 0)):
        (self.target,) = _as_cells([target])
        (self.eval_start,) = _as_cells([eval_start])
        self._dist = _distance_table()
        self._cache = [GridWorldState((c,), (self.target,), c) for c in range(N_CELLS)]

    def make_state(self, cell) -> GridWorldState:
        return self._cache[cell]

    def state_from_positions(self, pos) -> GridWorldState:
        (cell,) = _as_cells([pos])
        return self._cache[cell]

    def evaluation_state(self):
        return self._cache[self.eval_start]

    def sample_initial_state(self, rng):
        while True:
            cell = int(rng.integers(N_CELLS))
            if cell != self.target:
                return self._cache[cell]

    def reward(self, state) -> float:
        return 1.0 - self._dist[state.robots[0], self.target] / self.max_total_distance

    def is_terminal(self, state) -> bool:
        return state.robots[0] == self.target

    def step(self, state, action, rng=None):
        if self.is_terminal(state):
            return state, 1.0, True
        s_next = self._cache[_move(state.robots[0], action)]
        return s_next, self.reward(s_next), self.is_terminal(s_next)

    def states(self):
        return list(self._cache)


class ChainEnv(Environment):
    """Deterministic chain ``0 .. n-1``; action 0 moves right, 1 moves left.

    Reward is ``position / (n - 1)``; the last cell is terminal and, unlike
    the grid tasks, not absorbing.
    """

    name = "chain"
    n_actions = 2
    absorbing_terminal = False

    def __init__(self, n=5):
        self.n = n
        self.encoding_size = n
        self._cache = [StateId(np.eye(n)[k]) for k in range(n)]

    def position(self, state):
        return int(np.argmax(state.encoding))

    def make_state(self, k):
        return self._cache[k]

    def evaluation_state(self):
        return self._cache[0]

    def sample_initial_state(self, rng):
        return self._cache[int(rng.integers(self.n - 1))]

    def reward(self, state):
        return self.position(state) / (self.n - 1)

    def is_terminal(self, state):
        return self.position(state) == self.n - 1

    def step(self, state, action, rng=None):
        k = self.position(state)
        if self.is_terminal(state):
            return state, 0.0, True
        k = min(k + 1, self.n - 1) if action == 0 else max(k - 1, 0)
        s_next = self._cache[k]
        return s_next, self.reward(s_next), self.is_terminal(s_next)

    def states(self):
        return list(self._cache)


def value_iteration_oracle(env, gamma, tol=1e-9, p_noise=0.0, max_sweeps=100_000):
    """Optimal Q table of an enumerable, deterministic-step environment.

    Returns ``(states, Q)`` with ``Q[i, a]`` for ``states[i]``. Action noise is
    folded in as a mixture with the uniform action distribution. Terminal
    states of non-absorbing environments are worth zero after arrival.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    states = env.states()
    idx = {s.key: i for i, s in enumerate(states)}
    n, m = len(states), env.n_actions
    succ = np.empty((n, m), dtype=np.int64)
    rew = np.empty((n, m))
    cont = np.empty((n, m))
    for i, s in enumerate(states):
        for a in range(m):
            s2, r, term = env.step(s, a, None)
            succ[i, a] = idx[s2.key]
            rew[i, a] = r
            cont[i, a] = 1.0 if (not term or env.absorbing_terminal) else 0.0
    q = np.zeros((n, m))
    for _ in range(max_sweeps):
        v = q.max(axis=1)
        q_det = rew + gamma * cont * v[succ]
        q_new = (1.0 - p_noise) * q_det + p_noise * q_det.mean(axis=1, keepdims=True)
        delta = np.abs(q_new - q).max()
        q = q_new
        if delta <= tol:
            break
    return states, q


def make_env(name, **kwargs):
    envs = {"coopnav": CoopNavEnv, "gridworld1": GridWorld1, "chain": ChainEnv}
    try:
        cls = envs[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(envs)}") from None
    return cls(**kwargs)
