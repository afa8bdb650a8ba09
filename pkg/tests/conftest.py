import numpy as np
import pytest

from dop.envs import ChainEnv, CoopNavEnv, GridWorld1
from dop.mdp import Environment, StateId


class ActionProbeEnv(Environment):
    """One-hot state of the last executed action; lets tests observe noise."""

    name = "probe"
    absorbing_terminal = False

    def __init__(self, n_actions=5):
        self.n_actions = n_actions
        self.encoding_size = n_actions
        self._states = [StateId(np.eye(n_actions)[k]) for k in range(n_actions)]

    def sample_initial_state(self, rng):
        return self._states[0]

    def step(self, state, action, rng):
        return self._states[action], 0.5, False

    def reward(self, state):
        return 0.5

    def is_terminal(self, state):
        return False

    def executed(self, state):
        return int(np.argmax(state.encoding))


class BanditEnv(Environment):
    """Single decision with fixed per-arm rewards, then a non-absorbing terminal."""

    name = "bandit"
    absorbing_terminal = False

    def __init__(self, rewards=(0.2, 0.8)):
        self.rewards = tuple(rewards)
        self.n_actions = len(rewards)
        self.encoding_size = 1 + len(rewards)
        self.root = StateId(np.eye(self.encoding_size)[0])
        self.leaves = [StateId(np.eye(self.encoding_size)[1 + k]) for k in range(self.n_actions)]

    def sample_initial_state(self, rng):
        return self.root

    def step(self, state, action, rng):
        if state is not self.root:
            return state, 0.0, True
        return self.leaves[action], self.rewards[action], True

    def reward(self, state):
        return 0.0 if state is self.root else self.rewards[self.leaves.index(state)]

    def is_terminal(self, state):
        return state is not self.root

    def evaluation_state(self):
        return self.root


@pytest.fixture(scope="session")
def coopnav():
    return CoopNavEnv()


@pytest.fixture
def gridworld():
    return GridWorld1()


@pytest.fixture
def chain():
    return ChainEnv(5)


@pytest.fixture
def probe():
    return ActionProbeEnv(5)


@pytest.fixture
def bandit():
    return BanditEnv()
