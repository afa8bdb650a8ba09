"""MDP primitives shared by every environment and learner.

States are carried as :class:`StateId` objects: a flat feature encoding plus a
hashable key derived from it. Environments implement :class:`Environment`;
the stochastic-action model lives in :func:`stochastic_step`.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates an environment or state contract."""


def encoding_key(encoding: np.ndarray, xi: float = 0.0) -> bytes:
    """Canonical hashable key for a state encoding.

    With ``xi == 0`` the key is the exact float64 byte image (``-0.0`` is
    folded into ``0.0``). With ``xi > 0`` each coordinate is first quantized
    to a multiple of ``xi``.
    """
    enc = np.asarray(encoding, dtype=np.float64).ravel()
    if xi > 0:
        return np.floor(enc / xi).astype(np.int64).tobytes()
    return (enc + 0.0).tobytes()


class StateId:
    """A state as seen by learners: ``encoding`` (1-D float array) and ``key``."""

    __slots__ = ("encoding", "key")

    def __init__(self, encoding, key=None):
        enc = np.array(encoding, dtype=np.float64).ravel()
        enc.setflags(write=False)
        self.encoding = enc
        self.key = encoding_key(enc) if key is None else key

    def __eq__(self, other):
        if not isinstance(other, StateId):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return f"{type(self).__name__}({self.encoding.tolist()})"


@dataclass(frozen=True)
class Transition:
    """One experience tuple ``(s, a, s_next, r)`` plus the terminal flag."""

    s: StateId
    a: int
    s_next: StateId
    r: float
    terminal: bool = False


class Environment(abc.ABC):
    """Discrete-action MDP with an explicit random source.

    ``step`` must be a pure function of ``(state, action, rng draws)``.
    Environments whose terminal states keep paying their reward forever set
    ``absorbing_terminal = True``; learners then value a terminal state as
    ``r / (1 - gamma)`` instead of ``r``.
    """

    name = "env"
    n_actions: int
    encoding_size: int
    absorbing_terminal = False

    @abc.abstractmethod
    def sample_initial_state(self, rng: np.random.Generator) -> StateId:
        ...

    @abc.abstractmethod
    def step(self, state: StateId, action: int, rng: np.random.Generator):
        """Return ``(next_state, reward, terminal)``."""

    @abc.abstractmethod
    def reward(self, state: StateId) -> float:
        ...

    @abc.abstractmethod
    def is_terminal(self, state: StateId) -> bool:
        ...

    def check_action(self, action) -> int:
        a = int(action)
        if a != action or not 0 <= a < self.n_actions:
            raise ContractError(
                f"action {action!r} outside [0, {self.n_actions}) for {self.name}"
            )
        return a


def noisy_action(action: int, n_actions: int, p_noise: float, rng: np.random.Generator) -> int:
    """Action actually executed when commanding ``action``.

    With probability ``p_noise`` the command is replaced by a uniform draw
    from all actions (which may re-draw the commanded one).
    """
    if p_noise <= 0.0:
        return action
    if p_noise >= 1.0 or rng.random() < p_noise:
        return int(rng.integers(n_actions))
    return action


def stochastic_step(env: Environment, s: StateId, a: int, p_noise: float,
                    rng: np.random.Generator) -> Transition:
    if not 0.0 <= p_noise <= 1.0:
        raise ContractError(f"p_noise must lie in [0, 1], got {p_noise}")
    a = env.check_action(a)
    executed = noisy_action(a, env.n_actions, p_noise, rng)
    s_next, r, terminal = env.step(s, executed, rng)
    return Transition(s, a, s_next, float(r), bool(terminal))


def states_equal(s1: StateId, s2: StateId, xi: float = 0.0) -> bool:
    """True iff the L1 distance between the encodings is at most ``xi``."""
    if xi < 0:
        raise ContractError("xi must be non-negative")
    e1, e2 = s1.encoding, s2.encoding
    if e1.shape != e2.shape:
        raise ContractError(
            f"encoding lengths differ: {e1.shape[0]} vs {e2.shape[0]}"
        )
    if xi == 0:
        return bool(np.array_equal(e1, e2))
    # absorb summation round-off so the boundary stays inclusive
    return float(np.abs(e1 - e2).sum()) <= xi * (1.0 + 1e-12)
