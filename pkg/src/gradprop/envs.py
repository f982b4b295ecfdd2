"""Contextual bandits from regression data and a linear-quadratic control task.

Bandit tasks hide their labels: a learner only sees contexts and the scalar
reward ``-||y - a||^2``. The label-dependent helpers (``bandit_true_gradient``,
``test_mse``) exist for evaluation only.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import ConfigError, DivergenceError, ParseError, ShapeError


@dataclass(eq=False)
class BanditTask:
    X: np.ndarray
    Y: np.ndarray = field(repr=False)
    train_idx: np.ndarray
    test_idx: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.X.shape[0] != self.Y.shape[0]:
            raise ShapeError("contexts and labels differ in count")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ConfigError("train and test indices overlap")

    @property
    def state_dim(self) -> int:
        return self.X.shape[1]

    @property
    def action_dim(self) -> int:
        return self.Y.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def context(self, i) -> np.ndarray:
        return self.X[i]

    def manifest(self) -> dict:
        return {"source": self.source, "n_points": len(self), "n_train": int(self.train_idx.size),
                "n_test": int(self.test_idx.size), "feature_mean": self.mean.tolist(),
                "feature_scale": self.scale.tolist()}


def _split(n, test_fraction, rng):
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in [0, 1)")
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _standardize(X_raw, train_idx):
    mean = X_raw[train_idx].mean(axis=0)
    scale = X_raw[train_idx].std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (X_raw - mean) / scale, mean, scale


def normalize(task: BanditTask) -> BanditTask:
    """Re-standardize features on the task's own training statistics."""
    X, mean, scale = _standardize(task.X, task.train_idx)
    return BanditTask(X, task.Y, task.train_idx, task.test_idx, task.mean + task.scale * mean,
                      task.scale * scale, dict(task.source))


def load_regression_csv(path, feature_dim, label_dim, test_fraction=0.2, seed=0) -> BanditTask:
    """Read ``feature_dim`` feature columns followed by ``label_dim`` label columns.

    A first row that does not parse as numbers is treated as a header.
    """
    width = feature_dim + label_dim
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise ParseError(f"non-numeric field in {row!r}", lineno) from None
            if len(vals) != width:
                raise ParseError(f"expected {width} fields, found {len(vals)}", lineno)
            rows.append(vals)
    if not rows:
        raise ParseError(f"no data rows in {path}")
    data = np.asarray(rows, dtype=np.float64)
    rng = np.random.default_rng(seed)
    data = data[rng.permutation(data.shape[0])]
    train, test = _split(data.shape[0], test_fraction, rng)
    X, mean, scale = _standardize(data[:, :feature_dim], train)
    return BanditTask(X, data[:, feature_dim:], train, test, mean, scale,
                      {"kind": "csv", "path": str(Path(path).resolve()), "feature_dim": feature_dim,
                       "label_dim": label_dim, "test_fraction": test_fraction, "seed": seed})


def synthetic_bandit(m, d, hidden_complexity=1.0, n_points=2000, seed=0, test_fraction=0.2,
                     n_hidden=16) -> BanditTask:
    """Labels from a fixed random map ``y = L x + c + h * A tanh(B x + b)``.

    ``hidden_complexity`` ``h = 0`` gives an affine target.
    """
    if min(m, d, n_points) < 1 or hidden_complexity < 0:
        raise ConfigError("synthetic task parameters must be positive")
    rng = np.random.default_rng(seed)
    X_raw = rng.standard_normal((n_points, m))
    L = rng.standard_normal((d, m)) / np.sqrt(m) * 0.5
    c = rng.standard_normal(d) * 0.1
    Bm = rng.standard_normal((n_hidden, m)) / np.sqrt(m) * 1.5
    b = rng.standard_normal(n_hidden) * 0.5
    A = rng.standard_normal((d, n_hidden)) / np.sqrt(n_hidden)
    Y = X_raw @ L.T + c + hidden_complexity * np.tanh(X_raw @ Bm.T + b) @ A.T
    train, test = _split(n_points, test_fraction, rng)
    X, mean, scale = _standardize(X_raw, train)
    return BanditTask(X, Y, train, test, mean, scale,
                      {"kind": "synthetic", "m": m, "d": d, "hidden_complexity": hidden_complexity,
                       "n_points": n_points, "seed": seed, "test_fraction": test_fraction,
                       "n_hidden": n_hidden})


def task_from_manifest(manifest: dict) -> BanditTask:
    src = manifest["source"]
    if src["kind"] == "synthetic":
        return synthetic_bandit(src["m"], src["d"], src["hidden_complexity"], src["n_points"],
                                src["seed"], src["test_fraction"], src.get("n_hidden", 16))
    if src["kind"] == "csv":
        return load_regression_csv(src["path"], src["feature_dim"], src["label_dim"],
                                   src["test_fraction"], src["seed"])
    raise ConfigError(f"unknown task kind {src['kind']!r}")


def save_manifest(task: BanditTask, path) -> None:
    Path(path).write_text(json.dumps(task.manifest(), indent=2, sort_keys=True) + "\n")


def _check_index(task, i):
    if not 0 <= i < len(task):
        raise IndexError(f"context index {i} out of range for {len(task)} points")


def bandit_reward(task: BanditTask, i: int, a) -> float:
    _check_index(task, i)
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (task.action_dim,):
        raise ShapeError(f"action must have {task.action_dim} entries")
    diff = task.Y[i] - a
    return -float(np.dot(diff, diff))


def bandit_rewards(task: BanditTask, idx, A) -> np.ndarray:
    diff = task.Y[idx] - A
    return -np.einsum("bi,bi->b", diff, diff)


def bandit_true_gradient(task: BanditTask, i: int, a) -> np.ndarray:
    _check_index(task, i)
    return 2.0 * (task.Y[i] - np.asarray(a, dtype=np.float64))


def bandit_true_gradients(task: BanditTask, idx, A) -> np.ndarray:
    return 2.0 * (task.Y[idx] - A)


def test_mse(task: BanditTask, A, idx=None) -> float:
    """Mean over points of ``||y - a||^2 / d``."""
    idx = task.test_idx if idx is None else idx
    diff = task.Y[idx] - A
    return float(np.mean(np.sum(diff * diff, axis=1)) / task.action_dim)


test_mse.__test__ = False  # not a pytest test


@dataclass(eq=False)
class QuadraticMdp:
    """``s' = A s + B a + noise * N(0, I)``, reward ``-s'Ps - a'Ra``.

    ``goal_radius`` only sets the episode's hit flag; episodes always run to
    ``horizon`` steps.
    """

    A: np.ndarray
    B: np.ndarray
    P: np.ndarray
    R: np.ndarray
    gamma: float = 0.95
    noise: float = 0.0
    horizon: int = 100
    init_scale: float = 1.0
    goal_radius: float | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        m, d = self.B.shape
        if self.A.shape != (m, m) or self.P.shape != (m, m) or self.R.shape != (d, d):
            raise ShapeError("inconsistent QuadraticMdp matrix shapes")
        if np.max(np.abs(np.linalg.eigvals(self.A))) >= 1.0:
            raise ConfigError("dynamics matrix A must have spectral radius below 1")
        for name, M in (("P", self.P), ("R", self.R)):
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
                raise ConfigError(f"{name} must be symmetric positive definite")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


@dataclass
class EpisodeResult:
    steps: int
    total_reward: float
    hit: bool


def mdp_reset(env: QuadraticMdp, rng) -> np.ndarray:
    return env.init_scale * rng.standard_normal(env.state_dim)


def mdp_reward(env: QuadraticMdp, s, a) -> float:
    return -float(s @ env.P @ s) - float(a @ env.R @ a)


def mdp_step(env: QuadraticMdp, s, a, rng, t: int = 0):
    """Advance one step from ``s`` at episode step ``t``; returns ``(s', r, terminal)``.

    ``terminal`` marks the horizon (a time limit, not an absorbing state).
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    r = mdp_reward(env, s, a)
    s_next = env.A @ s + env.B @ a
    if env.noise > 0:
        s_next = s_next + env.noise * rng.standard_normal(env.state_dim)
    return s_next, r, t + 1 >= env.horizon


def mdp_stationary_covariance(env: QuadraticMdp, K=None) -> np.ndarray:
    """Stationary state covariance under ``a = K s`` (default ``K = 0``)."""
    Ac = env.A if K is None else env.A + env.B @ np.asarray(K, dtype=np.float64)
    if np.max(np.abs(np.linalg.eigvals(Ac))) >= 1.0:
        raise DivergenceError("closed loop is unstable")
    return linalg.solve_discrete_lyapunov(Ac, env.noise ** 2 * np.eye(env.state_dim))


def mdp_value_coefficients(env: QuadraticMdp, K, c=None):
    """``(S, q)`` with ``V(s) = s'Ss + q's + const`` for policy ``a = K s + c``."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    m, d = env.state_dim, env.action_dim
    c = np.zeros(d) if c is None else np.asarray(c, dtype=np.float64)
    if K.shape != (d, m):
        raise ShapeError(f"policy gain must be {d}x{m}")
    Ac = env.A + env.B @ K
    g = env.gamma
    if g > 0 and np.sqrt(g) * np.max(np.abs(np.linalg.eigvals(Ac))) >= 1.0:
        raise DivergenceError("discounted closed loop is unstable; value is unbounded")
    Q0 = -(env.P + K.T @ env.R @ K)
    S = linalg.solve_discrete_lyapunov(np.sqrt(g) * Ac.T, Q0) if g > 0 else Q0
    e = env.B @ c
    rhs = -2.0 * K.T @ env.R @ c + 2.0 * g * Ac.T @ S @ e
    q = np.linalg.solve(np.eye(m) - g * Ac.T, rhs)
    return S, q


def mdp_true_q_gradient(env: QuadraticMdp, K, s, a, c=None) -> np.ndarray:
    """Exact ``grad_a Q(s, a)`` for the policy ``a = K s + c`` (noise does not change it)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    S, q = mdp_value_coefficients(env, K, c)
    s_next = env.A @ s + env.B @ a
    return -2.0 * env.R @ a + env.gamma * env.B.T @ (2.0 * S @ s_next + q)


def mdp_rollout_q(env: QuadraticMdp, K, s, a, noise_draws, c=None) -> np.ndarray:
    """Monte-Carlo discounted returns after taking ``a`` in ``s`` then following ``K``.

    ``noise_draws`` has shape ``(n_rollouts, T, m)``; reusing it across calls
    gives common random numbers. Returns one truncated return per rollout.
    """
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    c = np.zeros(env.action_dim) if c is None else np.asarray(c, dtype=np.float64)
    n, T, _ = noise_draws.shape
    S_cur = np.tile(np.asarray(s, dtype=np.float64), (n, 1))
    A_cur = np.tile(np.asarray(a, dtype=np.float64), (n, 1))
    total = np.zeros(n)
    disc = 1.0
    for t in range(T):
        total += disc * (-np.einsum("bi,ij,bj->b", S_cur, env.P, S_cur)
                         - np.einsum("bi,ij,bj->b", A_cur, env.R, A_cur))
        S_cur = S_cur @ env.A.T + A_cur @ env.B.T + env.noise * noise_draws[:, t, :]
        A_cur = S_cur @ K.T + c
        disc *= env.gamma
    return total
