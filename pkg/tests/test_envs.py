import ast
import inspect
import json
import textwrap

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradprop import dac, envs, harness
from gradprop.errors import ConfigError, DivergenceError, ParseError, ShapeError

from .oracles import central_diff


def write_rows(path, rows, header=None):
    lines = ([header] if header else []) + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


# -- csv loading ---------------------------------------------------------------

def test_four_rows_split_three_one(tmp_path):
    p = write_rows(tmp_path / "d.csv", [[i, 2 * i, i % 2] for i in range(4)])
    task = envs.load_regression_csv(p, 2, 1, test_fraction=0.25, seed=0)
    assert task.train_idx.size == 3 and task.test_idx.size == 1
    assert len(task) == 4 and task.state_dim == 2 and task.action_dim == 1


def test_header_is_skipped(tmp_path):
    p = write_rows(tmp_path / "d.csv", [[1, 2, 3], [4, 5, 6], [7, 8, 9]], header="a,b,y")
    assert len(envs.load_regression_csv(p, 2, 1, 0.0)) == 3


def test_short_row_names_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2,3\n4,5,6\n7,8\n")
    with pytest.raises(ParseError, match="line 3") as exc:
        envs.load_regression_csv(p, 2, 1)
    assert exc.value.line == 3


def test_non_numeric_field(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2,3\n4,x,6\n")
    with pytest.raises(ParseError, match="line 2"):
        envs.load_regression_csv(p, 2, 1)


def test_labels_kept_in_original_units(tmp_path):
    rows = [[i, i * i, 10.0 + i] for i in range(10)]
    task = envs.load_regression_csv(write_rows(tmp_path / "d.csv", rows), 2, 1, 0.2, seed=3)
    assert sorted(task.Y[:, 0]) == [10.0 + i for i in range(10)]


@given(st.integers(0, 2**31))
def test_train_features_standardized(seed):
    rng = np.random.default_rng(seed)
    data = np.hstack([rng.normal(5, 3, (50, 4)), rng.standard_normal((50, 2))])
    task = envs.BanditTask(*_std_parts(data, rng))
    Xt = task.X[task.train_idx]
    assert np.all(np.abs(Xt.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(Xt.var(axis=0) - 1.0) < 1e-10)


def _std_parts(data, rng):
    train, test = envs._split(data.shape[0], 0.2, rng)
    X, mean, scale = envs._standardize(data[:, :4], train)
    return X, data[:, 4:], train, test, mean, scale


def test_csv_standardization_moments(tmp_path):
    rng = np.random.default_rng(0)
    rows = np.hstack([rng.normal(-2, 7, (40, 3)), rng.standard_normal((40, 2))])
    task = envs.load_regression_csv(write_rows(tmp_path / "d.csv", rows.tolist()), 3, 2, 0.25, 1)
    Xt = task.X[task.train_idx]
    assert np.all(np.abs(Xt.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(Xt.var(axis=0) - 1.0) < 1e-10)
    assert np.intersect1d(task.train_idx, task.test_idx).size == 0


def test_normalize_idempotent():
    task = envs.synthetic_bandit(4, 2, 1.0, 300, seed=5)
    again = envs.normalize(task)
    assert np.max(np.abs(again.X - task.X)) < 1e-12
    assert np.allclose(again.mean, task.mean, atol=1e-12)
    assert np.allclose(again.scale, task.scale, atol=1e-12)


# -- synthetic task ------------------------------------------------------------

def test_synthetic_deterministic():
    a = envs.synthetic_bandit(5, 3, 1.0, 200, seed=9)
    b = envs.synthetic_bandit(5, 3, 1.0, 200, seed=9)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert np.array_equal(a.test_idx, b.test_idx)


def test_affine_target_is_linearly_realizable():
    task = envs.synthetic_bandit(5, 3, 0.0, 500, seed=2)
    Xb = np.hstack([task.X, np.ones((len(task), 1))])
    coef, *_ = np.linalg.lstsq(Xb[task.train_idx], task.Y[task.train_idx], rcond=None)
    assert envs.test_mse(task, Xb[task.test_idx] @ coef) < 1e-20


def test_labels_bounded_seed_one():
    task = envs.synthetic_bandit(5, 3, 1.0, 2000, seed=1)
    # max |y| recorded at generation time for seed 1
    assert float(np.max(np.abs(task.Y))) == pytest.approx(3.647708572251389, rel=1e-12)


def test_synthetic_rejects_bad_params():
    with pytest.raises(ConfigError):
        envs.synthetic_bandit(0, 3)
    with pytest.raises(ConfigError):
        envs.synthetic_bandit(2, 3, hidden_complexity=-1.0)


def test_manifest_roundtrip(tmp_path):
    task = envs.synthetic_bandit(3, 2, 0.7, 100, seed=4)
    envs.save_manifest(task, tmp_path / "m.json")
    back = envs.task_from_manifest(json.loads((tmp_path / "m.json").read_text()))
    assert np.array_equal(back.X, task.X) and np.array_equal(back.Y, task.Y)
    m = task.manifest()
    assert m["n_train"] == 80 and m["n_test"] == 20 and m["source"]["seed"] == 4


# -- rewards and gradients -----------------------------------------------------

@pytest.fixture(scope="module")
def task():
    return envs.synthetic_bandit(4, 3, 1.0, 50, seed=0)


def test_reward_zero_at_label(task):
    assert envs.bandit_reward(task, 7, task.Y[7]) == 0.0


def test_reward_unit_offset(task):
    a = task.Y[3] - np.array([1.0, 0.0, 0.0])
    assert envs.bandit_reward(task, 3, a) == pytest.approx(-1.0, abs=1e-15)


@given(st.integers(0, 49), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_reward_direct_sum(i, a):
    task = envs.synthetic_bandit(4, 3, 1.0, 50, seed=0)
    expect = -sum((y - v) ** 2 for y, v in zip(task.Y[i], a))
    assert envs.bandit_reward(task, i, np.array(a)) == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_reward_index_and_shape_errors(task):
    with pytest.raises(IndexError):
        envs.bandit_reward(task, 50, np.zeros(3))
    with pytest.raises(ShapeError):
        envs.bandit_reward(task, 0, np.zeros(2))
    with pytest.raises(IndexError):
        envs.bandit_true_gradient(task, -1, np.zeros(3))


def test_true_gradient_zero_and_scaled(task):
    assert np.array_equal(envs.bandit_true_gradient(task, 2, task.Y[2]), np.zeros(3))
    a = task.Y[2] - np.array([1.0, 0.0, 0.0])
    assert np.allclose(envs.bandit_true_gradient(task, 2, a), [2.0, 0.0, 0.0], atol=1e-15)


@given(st.integers(0, 49), st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_true_gradient_matches_finite_differences(i, a):
    task = envs.synthetic_bandit(4, 3, 1.0, 50, seed=0)
    fd = central_diff(lambda x: envs.bandit_reward(task, i, x), np.array(a), h=1e-6)[:, 0]
    assert np.allclose(envs.bandit_true_gradient(task, i, np.array(a)), fd, rtol=0, atol=1e-8)


def test_test_mse_is_normalized_by_dimension(task):
    A = task.Y[task.test_idx] + 0.5
    assert envs.test_mse(task, A) == pytest.approx(0.25)


# -- learners never see labels -------------------------------------------------

LABEL_ACCESSORS = {"Y", "bandit_true_gradient", "bandit_true_gradients", "test_mse"}


def test_training_loop_mentions_no_label_accessor():
    src = textwrap.dedent(inspect.getsource(harness._train_bandit_rl))
    names = {n.attr if isinstance(n, ast.Attribute) else n.id
             for n in ast.walk(ast.parse(src)) if isinstance(n, (ast.Attribute, ast.Name))}
    assert not names & LABEL_ACCESSORS


def test_labels_only_read_by_reward_and_evaluation():
    """Run a short training loop and record which functions touch the labels."""
    readers = set()

    class Watched(envs.BanditTask):
        def __getattribute__(self, name):
            if name == "Y":
                readers.add(inspect.stack()[1].function)
            return super().__getattribute__(name)

    base = envs.synthetic_bandit(3, 2, 1.0, 60, seed=1)
    task = Watched(base.X, base.Y, base.train_idx, base.test_idx, base.mean, base.scale, base.source)
    cfg = harness.parse_config(
        "[task]\nkind=synthetic\nm=3\nd=2\nn_points=60\n[networks]\nactor_hidden=4\n"
        "critic_hidden=4\ndeviator_hidden=4\n[run]\ntotal_steps=40\neval_period=20\n")
    model = harness.build_model(cfg, 3, 2, 0)
    rng = np.random.default_rng(0)
    harness._train_bandit_rl(cfg, task, model, rng, dac.ReplayBuffer(100, 0),
                             harness._Recorder(cfg))
    readers -= {"__post_init__", "action_dim"}  # shape only
    assert readers <= {"bandit_reward", "bandit_true_gradients", "test_mse"}
    assert "bandit_reward" in readers


# -- quadratic MDP -------------------------------------------------------------

def small_env(**kw):
    A = np.array([[0.9, 0.2], [-0.1, 0.7]])
    B = np.array([[0.5, 0.0], [0.2, 1.0]])
    base = dict(A=A, B=B, P=np.eye(2), R=0.5 * np.eye(2), gamma=0.9, noise=0.3)
    base.update(kw)
    return envs.QuadraticMdp(**base)


def test_zero_dynamics():
    env = envs.QuadraticMdp(np.zeros((2, 2)), np.zeros((2, 1)), np.eye(2), np.eye(1), noise=0.0)
    s2, _, _ = envs.mdp_step(env, np.array([3.0, -1.0]), np.array([5.0]), np.random.default_rng(0))
    assert np.array_equal(s2, [0.0, 0.0])


def test_reward_with_zero_action():
    env = small_env(P=np.eye(2))
    s = np.array([0.3, -1.2])
    _, r, _ = envs.mdp_step(env, s, np.zeros(2), np.random.default_rng(0))
    assert r == pytest.approx(-(s @ s), abs=1e-15)


def test_horizon_terminal_flag():
    env = small_env(horizon=3)
    rng = np.random.default_rng(0)
    flags = [envs.mdp_step(env, np.zeros(2), np.zeros(2), rng, t)[2] for t in range(3)]
    assert flags == [False, False, True]


def test_stationary_covariance_matches_simulation():
    env = small_env(A=np.array([[0.5, 0.2], [-0.1, 0.4]]), noise=0.5)
    K = np.array([[-0.2, 0.0], [0.1, -0.3]])
    rng = np.random.default_rng(1)
    s = np.zeros(2)
    acc = np.zeros((2, 2))
    n, burn = 100_000, 200
    for t in range(n + burn):
        s, _, _ = envs.mdp_step(env, s, K @ s, rng)
        if t >= burn:
            acc += np.outer(s, s)
    emp = acc / n
    exact = envs.mdp_stationary_covariance(env, K)
    assert np.all(np.abs(np.diag(emp) - np.diag(exact)) < 0.05 * np.diag(exact))
    assert np.max(np.abs(emp - exact)) < 0.05 * np.max(np.abs(exact))


def test_q_gradient_one_step_case():
    env = small_env(gamma=0.0)
    a = np.array([0.4, -1.0])
    g = envs.mdp_true_q_gradient(env, np.zeros((2, 2)), np.array([1.0, 2.0]), a)
    assert np.array_equal(g, -2.0 * env.R @ a)


def test_q_gradient_without_action_effect():
    env = small_env(B=np.zeros((2, 2)))
    a = np.array([0.4, -1.0])
    g = envs.mdp_true_q_gradient(env, np.array([[0.1, 0.0], [0.0, 0.2]]), np.ones(2), a)
    assert np.allclose(g, -2.0 * env.R @ a, atol=1e-14)


def test_q_gradient_matches_noise_free_rollouts():
    env = small_env(noise=0.0)
    K = np.array([[-0.3, 0.1], [0.05, -0.2]])
    c = np.array([0.1, -0.2])
    s, a = np.array([1.0, -0.5]), np.array([0.2, 0.3])
    draws = np.zeros((1, 400, 2))
    fd = central_diff(lambda x: envs.mdp_rollout_q(env, K, s, x, draws, c)[0], a, h=1e-4)[:, 0]
    assert np.allclose(envs.mdp_true_q_gradient(env, K, s, a, c), fd, rtol=1e-7, atol=1e-9)


def test_q_gradient_matches_monte_carlo_rollouts():
    env = small_env()
    K = np.array([[-0.3, 0.1], [0.05, -0.2]])
    s, a = np.array([1.0, -0.5]), np.array([0.2, 0.3])
    h, n, chunk, T = 1e-2, 100_000, 10_000, 150
    rng = np.random.default_rng(0)
    diff = np.zeros(2)
    for _ in range(n // chunk):
        draws = rng.standard_normal((chunk, T, 2))
        for i, e in enumerate(np.eye(2)):
            up = envs.mdp_rollout_q(env, K, s, a + h * e, draws)
            down = envs.mdp_rollout_q(env, K, s, a - h * e, draws)
            diff[i] += np.sum(up - down)
    mc = diff / n / (2 * h)
    true = envs.mdp_true_q_gradient(env, K, s, a)
    assert np.linalg.norm(mc - true) < 0.02 * np.linalg.norm(true)


def test_unstable_closed_loop_diverges():
    env = small_env()
    with pytest.raises(DivergenceError):
        envs.mdp_true_q_gradient(env, np.array([[3.0, 0.0], [0.0, 3.0]]), np.ones(2), np.ones(2))
    with pytest.raises(DivergenceError):
        envs.mdp_stationary_covariance(env, np.array([[3.0, 0.0], [0.0, 3.0]]))


@pytest.mark.parametrize("kw", [dict(A=np.eye(2) * 1.01), dict(P=-np.eye(2)),
                                dict(R=np.array([[1.0, 2.0], [0.0, 1.0]])), dict(gamma=1.0),
                                dict(horizon=0)])
def test_invalid_mdp(kw):
    with pytest.raises(ConfigError):
        small_env(**kw)


def test_mdp_shape_check():
    with pytest.raises(ShapeError):
        small_env(R=np.eye(3))
