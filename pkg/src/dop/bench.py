"""Experiment harness: configuration files, seeding, CSV metrics and summaries.

A configuration file is a flat list of ``key = value`` lines (``#`` starts a
comment). Unknown keys are rejected.

Per-run seeds come from :class:`numpy.random.SeedSequence`: run ``k`` of an
experiment with master seed ``m`` uses the first 32-bit word generated by
``SeedSequence(entropy=m, spawn_key=(k,))``. The mixing is a hash, so
neighbouring master seeds do not produce correlated runs.

Each CSV row is one outer iteration of one run. ``cumulative_reward`` is a
greedy evaluation of the policy at the end of that iteration, not the reward
collected while training. A sidecar file ``<out>.explored.csv`` splits the
explored-state count into states reached by the search tree or by acting,
and states reached only by roll-outs.
"""

from __future__ import annotations

import configparser
import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .agent import DOPPlanner
from .baselines import DQNAgent, TDSearchAgent
from .envs import make_env
from .qfunc import save_checkpoint

ALGORITHMS = ("dop", "vanilla-uct", "random-uct", "dqn", "td-search", "qcp-tabular")
ENVIRONMENTS = ("coopnav", "gridworld1")
HEADER = ("iteration", "run", "cumulative_reward", "explored_total", "explored_new",
          "dataset_size", "wall_time_ms")
SPLIT_HEADER = ("iteration", "run", "explored_tree", "explored_rollout")
SUMMARY_HEADER = ("algorithm", "iteration", "runs", "reward_mean", "reward_std",
                  "explored_mean", "explored_std")


class SchemaError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "dop"
    env: str = "coopnav"
    runs: int = 10
    seed: int = 0
    out: str = "results.csv"
    jobs: int = 1
    checkpoint_dir: str = ""
    # outer loop
    n_iterations: int = 10
    timesteps: int = 10
    gamma: float = 0.8
    alpha: float = 0.15
    adam_lr: float = 0.001
    lambda0: float = 0.5
    batch_size: int = 32
    hidden_width: int = 64
    epochs_per_update: int = 1
    n_eval: int = 5
    # search
    horizon: int = 4
    n_rollouts: int = 3
    c: float = 0.7
    eps_admissible: float = 0.3
    eps_rollout: float = 0.2
    xi: float = 0.0
    rollout_cap: int = 20
    n_sim: int = 32
    mc_backup: bool = True
    p_noise: float = 0.05
    randomize_targets: bool = False
    # baselines
    td_simulations: int = 32
    td_eps: float = 0.2
    td_depth: int = 20
    dqn_episodes: int = 4
    dqn_eps_start: float = 1.0
    dqn_eps_end: float = 0.1
    dqn_capacity: int = 10_000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {list(ALGORITHMS)}")
        if self.env not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env!r}; choose from {list(ENVIRONMENTS)}")
        if self.runs < 1 or self.jobs < 1:
            raise ValueError("runs and jobs must be >= 1")

    def override(self, **changes):
        """Copy with ``changes`` applied; ``None`` values are ignored."""
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except (KeyError, ValueError):
        raise ValueError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc.message.splitlines()[0]}") from None
    values = {}
    for key, raw in parser["experiment"].items():
        if key not in _TYPES:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def run_seed(master: int, k: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(k,)).generate_state(1)[0])


def make_environment(cfg: ExperimentConfig):
    if cfg.env == "coopnav":
        return make_env("coopnav", randomize_targets=cfg.randomize_targets)
    return make_env(cfg.env)


def make_estimator(cfg: ExperimentConfig, random_state=None):
    # alpha is the table's step size; the network is trained by Adam at adam_lr
    lr = cfg.alpha if cfg.algorithm == "qcp-tabular" else cfg.adam_lr
    if cfg.algorithm == "dqn":
        return DQNAgent(
            n_iterations=cfg.n_iterations, episodes_per_iteration=cfg.dqn_episodes,
            episode_length=cfg.timesteps, eps_start=cfg.dqn_eps_start,
            eps_end=cfg.dqn_eps_end, gamma=cfg.gamma, learning_rate=lr,
            batch_size=cfg.batch_size, capacity=cfg.dqn_capacity,
            hidden_width=cfg.hidden_width, p_noise=cfg.p_noise, eval_horizon=cfg.timesteps,
            n_eval=cfg.n_eval, random_state=random_state)
    if cfg.algorithm == "td-search":
        return TDSearchAgent(
            n_iterations=cfg.n_iterations, timesteps=cfg.timesteps,
            n_simulations=cfg.td_simulations, eps=cfg.td_eps, depth=cfg.td_depth,
            gamma=cfg.gamma, learning_rate=lr, batch_size=cfg.batch_size,
            hidden_width=cfg.hidden_width, p_noise=cfg.p_noise, n_eval=cfg.n_eval,
            random_state=random_state)
    mode = {"vanilla-uct": "vanilla", "random-uct": "random"}.get(cfg.algorithm, "dop")
    return DOPPlanner(
        q="tabular" if cfg.algorithm == "qcp-tabular" else "neural", mode=mode,
        n_iterations=cfg.n_iterations, timesteps=cfg.timesteps, gamma=cfg.gamma,
        learning_rate=lr, lambda0=cfg.lambda0, horizon=cfg.horizon,
        n_rollouts=cfg.n_rollouts, c=cfg.c, eps_admissible=cfg.eps_admissible,
        eps_rollout=cfg.eps_rollout, xi=cfg.xi, rollout_cap=cfg.rollout_cap, n_sim=cfg.n_sim,
        p_noise=cfg.p_noise, batch_size=cfg.batch_size, hidden_width=cfg.hidden_width,
        epochs_per_update=cfg.epochs_per_update, mc_backup=cfg.mc_backup, n_eval=cfg.n_eval,
        random_state=random_state)


def run_single(cfg: ExperimentConfig, k: int):
    """Run ``k`` of an experiment. Returns ``(records, split_rows)``."""
    seed = run_seed(cfg.seed, k)
    env = make_environment(cfg)
    est = make_estimator(cfg, seed)
    hook = None
    if cfg.checkpoint_dir and isinstance(est, DOPPlanner):
        os.makedirs(cfg.checkpoint_dir, exist_ok=True)

        def hook(q, iteration):
            name = f"{cfg.algorithm}-run{k}-iter{iteration}.txt"
            save_checkpoint(q, os.path.join(cfg.checkpoint_dir, name), seed, iteration)

        est.fit(env, run=k, checkpoint_hook=hook)
    else:
        est.fit(env, run=k)
    split = [(r.iteration, r.run, tree, roll)
             for r, (tree, roll) in zip(est.records_, est.ledger_.per_iteration_split)]
    return est.records_, split


def _run_single_star(args):
    return run_single(*args)


def run_experiment(cfg: ExperimentConfig, write=True):
    """Run every repetition of ``cfg`` and return the records sorted by (run, iteration).

    With ``write`` the records go to ``cfg.out`` and the explored-state split
    to its sidecar file.
    """
    jobs = [(cfg, k) for k in range(cfg.runs)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_single_star, jobs))
    else:
        results = [run_single(*job) for job in jobs]
    records = sorted((r for recs, _ in results for r in recs), key=lambda r: (r.run, r.iteration))
    split = sorted((row for _, rows in results for row in rows), key=lambda row: (row[1], row[0]))
    if write:
        write_records(cfg.out, records)
        write_rows(sidecar_path(cfg.out), SPLIT_HEADER, split)
    return records


def sidecar_path(path) -> str:
    path = str(path)
    stem = path[:-4] if path.endswith(".csv") else path
    return stem + ".explored.csv"


def format_record(r):
    return [str(r.iteration), str(r.run), f"{r.cumulative_reward:.6f}", str(r.explored_total),
            str(r.explored_new), str(r.dataset_size), str(r.wall_time_ms)]


def write_records(path, records):
    write_rows(path, HEADER, [format_record(r) for r in records])


def write_rows(path, header, rows):
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise OSError(f"output directory does not exist: {path.parent}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


_COLUMN_TYPES = {"cumulative_reward": float}


def read_results(path):
    """Rows of a results CSV as dicts, after checking the header and value types."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        missing = [c for c in HEADER if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column {missing[0]!r}")
        extra = [c for c in header if c not in HEADER]
        if extra:
            raise SchemaError(f"{path}: unexpected column {extra[0]!r}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}")
            row = {}
            for name, value in zip(header, raw):
                try:
                    row[name] = _COLUMN_TYPES.get(name, int)(value)
                except ValueError:
                    raise SchemaError(f"{path}:{lineno}: bad value {value!r} in column {name!r}") from None
            rows.append(row)
    return rows


def summarize(paths, out=None, labels=None):
    """Per-(algorithm, iteration) mean and population std of reward and explored states.

    The algorithm label of each file defaults to its file name without
    extension.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("no input files")
    labels = labels or [Path(p).stem for p in paths]
    table = []
    for label, path in zip(labels, paths):
        by_iter = {}
        for row in read_results(path):
            by_iter.setdefault(row["iteration"], []).append(row)
        for it in sorted(by_iter):
            rows = by_iter[it]
            reward = np.array([r["cumulative_reward"] for r in rows])
            explored = np.array([r["explored_total"] for r in rows], dtype=float)
            table.append({
                "algorithm": label, "iteration": it, "runs": len(rows),
                "reward_mean": reward.mean(), "reward_std": reward.std(),
                "explored_mean": explored.mean(), "explored_std": explored.std(),
            })
    if out is not None:
        write_rows(out, SUMMARY_HEADER, [
            [t["algorithm"], t["iteration"], t["runs"]]
            + [f"{t[k]:.6f}" for k in SUMMARY_HEADER[3:]] for t in table])
    return table
