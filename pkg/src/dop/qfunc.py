"""Action-value approximators and the aggregated-dataset training loop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .mdp import StateId, Transition, encoding_key

CHECKPOINT_MAGIC = "# dop-qfunc"
CHECKPOINT_VERSION = 1


def td_target(t: Transition, q, gamma: float, absorbing: bool = False) -> float:
    """Regression target ``r + gamma * max_a' Q(s', a')``.

    A terminal transition does not bootstrap. When the environment's terminal
    states are absorbing the agent keeps collecting ``r`` forever, so the
    target becomes the closed form ``r / (1 - gamma)``.
    """
    if t.terminal:
        return t.r / (1.0 - gamma) if absorbing else t.r
    if gamma == 0.0:
        return t.r
    return t.r + gamma * float(np.max(q.q_values(t.s_next)))


def batch_targets(q, batch, gamma, absorbing=False) -> np.ndarray:
    rewards = np.array([t.r for t in batch])
    terminal = np.array([t.terminal for t in batch])
    if gamma == 0.0:
        return rewards
    boot = q.predict_states([t.s_next for t in batch]).max(axis=1)
    tail = rewards / (1.0 - gamma) if absorbing else rewards
    return np.where(terminal, tail, rewards + gamma * boot)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, alpha, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments must have the same length")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=float), np.asarray(g, dtype=float)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params.append(p - alpha * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# Aggregated dataset


@dataclass
class AggregatedDataset:
    """Append-only union of the per-iteration datasets."""

    transitions: list = field(default_factory=list)
    iteration_marks: list = field(default_factory=list)

    def add(self, new_transitions):
        """Append to the dataset of the iteration in progress."""
        self.transitions.extend(new_transitions)
        return self

    def close_iteration(self):
        """Mark the end of the current iteration's dataset."""
        if self.iteration_marks and self.iteration_marks[-1] == len(self.transitions):
            raise ValueError("iteration collected no transitions")
        self.iteration_marks.append(len(self.transitions))
        return self

    def aggregate(self, new_transitions):
        """Add a whole iteration's dataset at once."""
        return self.add(new_transitions).close_iteration()

    def iteration(self, i):
        """Transitions contributed by the ``i``-th aggregation call (0-based)."""
        lo = self.iteration_marks[i - 1] if i > 0 else 0
        return self.transitions[lo:self.iteration_marks[i]]

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)


def train_epoch(q, data, gamma, alpha=None, batch_size=32, rng=None, absorbing=False):
    """One shuffled pass over ``data`` in mini-batches; returns mean squared loss.

    Targets of each batch are computed from the current parameters and then
    held fixed for that batch's gradient step.
    """
    transitions = list(data)
    if not transitions:
        raise ValueError("cannot train on an empty dataset")
    if alpha is None:
        alpha = q.learning_rate
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(rng)
    order = rng.permutation(len(transitions))
    total = 0.0
    for lo in range(0, len(order), batch_size):
        batch = [transitions[k] for k in order[lo:lo + batch_size]]
        targets = batch_targets(q, batch, gamma, absorbing)
        total += q.train_batch(batch, targets, alpha)
    q.n_samples_seen_ = getattr(q, "n_samples_seen_", 0) + len(transitions)
    return total / len(transitions)


# --------------------------------------------------------------------------
# Estimators


class _QBase(BaseEstimator):
    def predict_states(self, states):
        return np.stack([self.q_values(s) for s in states])

    def greedy_action(self, state) -> int:
        # np.argmax returns the first maximum: ties go to the lowest index
        return int(np.argmax(self.q_values(state)))

    def partial_fit(self, transitions, rng=None, absorbing=False):
        """One epoch over ``transitions`` at the configured learning rate."""
        if not self._is_initialized():
            first = next(iter(transitions))
            self.initialize(first.s.encoding.shape[0], self.n_actions)
        self.loss_ = train_epoch(self, transitions, self.gamma, self.learning_rate,
                                 self.batch_size, rng, absorbing)
        return self

    def fit(self, transitions, n_epochs=1, rng=None, absorbing=False):
        transitions = list(transitions)
        if not transitions:
            raise ValueError("cannot fit on an empty dataset")
        self.initialize(transitions[0].s.encoding.shape[0], self.n_actions)
        rng = np.random.default_rng(rng)
        for _ in range(n_epochs):
            self.partial_fit(transitions, rng, absorbing)
        return self

    def _is_initialized(self):
        return hasattr(self, "n_features_in_")


class NeuralQ(_QBase):
    """Two-layer network: ReLU hidden layer, linear output (one value per action).

    Trained with Adam on the masked squared TD error; only the output of the
    taken action receives loss signal.
    """

    def __init__(self, n_actions=5, hidden_width=64, learning_rate=1e-3, batch_size=32,
                 gamma=0.8, random_state=None):
        self.n_actions = n_actions
        self.hidden_width = hidden_width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.gamma = gamma
        self.random_state = random_state

    def initialize(self, n_features, n_actions=None):
        if n_actions is not None:
            self.n_actions = n_actions
        rng = np.random.default_rng(self.random_state)
        h, a = self.hidden_width, self.n_actions
        b1 = 1.0 / np.sqrt(n_features)
        b2 = 1.0 / np.sqrt(h)
        self.params_ = [
            rng.uniform(-b1, b1, size=(n_features, h)),
            rng.uniform(-b1, b1, size=h),
            rng.uniform(-b2, b2, size=(h, a)),
            rng.uniform(-b2, b2, size=a),
        ]
        self.adam_ = AdamState.zeros_like(self.params_)
        self.n_features_in_ = n_features
        self._cache = {}
        return self

    @property
    def n_params(self):
        return sum(p.size for p in self.params_)

    def _forward(self, X):
        W1, b1, W2, b2 = self.params_
        z = X @ W1 + b1
        h = np.maximum(z, 0.0)
        return z, h, h @ W2 + b2

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self._forward(X)[2]

    def q_values(self, state: StateId) -> np.ndarray:
        out = self._cache.get(state.key)
        if out is None:
            out = self._forward(state.encoding)[2]
            self._cache[state.key] = out
        return out

    def predict_states(self, states):
        return self._forward(np.stack([s.encoding for s in states]))[2]

    def loss_and_gradients(self, X, actions, targets, params=None):
        """Batch loss ``sum((target - Q(s, a))**2) / B`` and its exact gradient."""
        W1, b1, W2, b2 = self.params_ if params is None else params
        X = np.atleast_2d(np.asarray(X, dtype=float))
        actions = np.asarray(actions, dtype=np.int64)
        targets = np.asarray(targets, dtype=float)
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty batch")
        z = X @ W1 + b1
        h = np.maximum(z, 0.0)
        out = h @ W2 + b2
        rows = np.arange(n)
        err = out[rows, actions] - targets
        loss = float(err @ err) / n
        g_out = np.zeros_like(out)
        g_out[rows, actions] = 2.0 * err / n
        gW2 = h.T @ g_out
        gb2 = g_out.sum(axis=0)
        g_z = (g_out @ W2.T) * (z > 0)
        gW1 = X.T @ g_z
        gb1 = g_z.sum(axis=0)
        return loss, [gW1, gb1, gW2, gb2]

    def train_batch(self, batch, targets, alpha):
        X = np.stack([t.s.encoding for t in batch])
        actions = [t.a for t in batch]
        loss, grads = self.loss_and_gradients(X, actions, targets)
        self.params_, self.adam_ = adam_step(self.params_, grads, self.adam_, alpha)
        self._cache = {}
        return loss * len(batch)

    def get_flat_params(self):
        return np.concatenate([p.ravel() for p in self.params_])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        out, k = [], 0
        for p in self.params_:
            out.append(flat[k:k + p.size].reshape(p.shape).copy())
            k += p.size
        self.params_ = out
        self._cache = {}
        return self


class TabularQ(_QBase):
    """Lookup table over canonical state keys; missing entries read as 0.

    A batch moves each touched entry a fraction ``alpha`` of the way toward
    the mean target of its samples in that batch.
    """

    def __init__(self, n_actions=5, learning_rate=0.15, batch_size=32, gamma=0.8, xi=0.0):
        self.n_actions = n_actions
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.gamma = gamma
        self.xi = xi

    def initialize(self, n_features, n_actions=None):
        if n_actions is not None:
            self.n_actions = n_actions
        self.table_ = {}
        self.n_features_in_ = n_features
        return self

    def _key(self, state):
        return state.key if self.xi == 0 else encoding_key(state.encoding, self.xi)

    def q_values(self, state: StateId) -> np.ndarray:
        row = self.table_.get(self._key(state))
        return row if row is not None else np.zeros(self.n_actions)

    def predict(self, X):
        check_is_fitted(self, "table_")
        X = check_array(X, dtype=np.float64)
        out = np.zeros((X.shape[0], self.n_actions))
        for i, enc in enumerate(X):
            row = self.table_.get(encoding_key(enc, self.xi))
            if row is not None:
                out[i] = row
        return out

    def train_batch(self, batch, targets, alpha):
        sums = {}
        loss = 0.0
        for t, y in zip(batch, targets):
            k = (self._key(t.s), t.a)
            acc = sums.setdefault(k, [0.0, 0])
            acc[0] += y
            acc[1] += 1
            err = y - self.q_values(t.s)[t.a]
            loss += err * err
        for (key, a), (total, count) in sums.items():
            row = self.table_.get(key)
            if row is None:
                row = self.table_[key] = np.zeros(self.n_actions)
            row[a] += alpha * (total / count - row[a])
        return loss


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(q, path, seed=None, iteration=None):
    """Write ``q`` as a versioned text file (exact round trip via ``repr``)."""
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    if isinstance(q, NeuralQ):
        check_is_fitted(q, "params_")
        lines.append("kind neural")
        lines.append(f"layers {q.n_features_in_} {q.hidden_width} {q.n_actions}")
    else:
        check_is_fitted(q, "table_")
        lines.append("kind tabular")
        lines.append(f"layers {q.n_features_in_} 0 {q.n_actions}")
        lines.append(f"xi {q.xi!r}")
    lines.append(f"seed {seed if seed is not None else 'none'}")
    lines.append(f"iteration {iteration if iteration is not None else 'none'}")
    lines.append("params")
    if isinstance(q, NeuralQ):
        lines.extend(repr(float(x)) for x in q.get_flat_params())
    else:
        for key in sorted(q.table_):
            row = " ".join(repr(float(x)) for x in q.table_[key])
            lines.append(f"{key.hex()} {row}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(q, header)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a dop Q-function checkpoint")
    version = int(lines[0].split()[-1].lstrip("v"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = {}
    k = 1
    while lines[k] != "params":
        name, _, value = lines[k].partition(" ")
        header[name] = value
        k += 1
    body = lines[k + 1:]
    n_in, hidden, n_act = (int(x) for x in header["layers"].split())
    if header["kind"] == "neural":
        q = NeuralQ(n_actions=n_act, hidden_width=hidden)
        q.initialize(n_in, n_act)
        q.set_flat_params([float(x) for x in body])
    else:
        q = TabularQ(n_actions=n_act, xi=float(header.get("xi", "0.0")))
        q.initialize(n_in, n_act)
        for line in body:
            key, *vals = line.split()
            q.table_[bytes.fromhex(key)] = np.array([float(v) for v in vals])
    return q, header
