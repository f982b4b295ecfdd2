"""Experiment configuration, training loops, metrics and gradient reports."""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dac, envs
from . import netcore as nc
from .errors import ConfigError, NumericError, ShapeError
from .optim import ADAPTIVE, LINEAR_DECAY, NoiseSchedule, RmsPropState, noise_sigma, rmsprop_inplace

log = logging.getLogger(__name__)

ALGORITHMS = ("gprop", "gprop-explicit", "copdac-q", "supervised-backprop")
TASK_KINDS = ("synthetic", "csv", "mdp")

METRIC_FIELDS = ("step", "test_mse", "grad_nmse", "mean_xi", "sigma2",
                 "steps_per_episode", "reward_per_step", "wall_ms")


class NumericAbort(NumericError):
    """Training hit a non-finite value; the last good checkpoint was written."""


@dataclass
class MetricsRecord:
    step: int
    test_mse: float | None = None
    grad_nmse: float | None = None
    mean_xi: float | None = None
    sigma2: float | None = None
    steps_per_episode: float | None = None
    reward_per_step: float | None = None
    wall_ms: int = 0


def validate_record(rec: dict) -> None:
    """Schema check for one metrics row (parsed JSON)."""
    if set(rec) != set(METRIC_FIELDS):
        raise ConfigError(f"metrics record fields {sorted(rec)} != {sorted(METRIC_FIELDS)}")
    if not isinstance(rec["step"], int) or rec["step"] < 0:
        raise ConfigError("metrics step must be a non-negative integer")
    if not isinstance(rec["wall_ms"], int):
        raise ConfigError("wall_ms must be an integer")
    for k in METRIC_FIELDS[1:-1]:
        if rec[k] is not None and not isinstance(rec[k], (int, float)):
            raise ConfigError(f"metrics field {k} must be a number or null")


def validate_metrics_file(path) -> list[dict]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    last = -1
    for rec in rows:
        validate_record(rec)
        if rec["step"] <= last:
            raise ConfigError("metrics steps must increase")
        last = rec["step"]
    return rows


# -- configuration ------------------------------------------------------------

def _ints(text) -> tuple[int, ...]:
    text = str(text).strip()
    return tuple(int(t) for t in text.replace(",", " ").split()) if text else ()


def _matrix(text) -> np.ndarray:
    rows = [r for r in str(text).split(";") if r.strip()]
    return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])


def _fmt_matrix(M) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in row) for row in np.atleast_2d(M))


@dataclass
class TaskSpec:
    kind: str = "synthetic"
    # synthetic
    m: int = 5
    d: int = 3
    hidden_complexity: float = 1.0
    n_points: int = 2000
    # csv
    path: str = ""
    feature_dim: int = 21
    label_dim: int = 7
    # both bandit kinds
    test_fraction: float = 0.2
    task_seed: int | None = None
    # mdp
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    P: np.ndarray | None = None
    R: np.ndarray | None = None
    noise: float = 0.0
    horizon: int = 100
    init_scale: float = 1.0
    goal_radius: float | None = None
    test_states: int = 100


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    algorithm: str = "gprop"
    actor_hidden: tuple[int, ...] = (300, 100)
    critic_hidden: tuple[int, ...] = (100, 10)
    deviator_hidden: tuple[int, ...] = (300, 100)
    actor_activation: str = nc.RECTIFIER
    critic_activation: str = nc.RECTIFIER
    deviator_activation: str = nc.RECTIFIER
    hyper: dac.Hyper = field(default_factory=dac.Hyper)
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)
    replay_capacity: int = 100_000
    batch_size: int = 32
    clone_period: int = 1000
    warmup: int = 32
    total_steps: int | None = None
    eval_period: int = 1000
    eval_points: int | None = None
    seed: int = 0
    out: str | None = None
    record_wall_time: bool = False

    @property
    def is_bandit(self) -> bool:
        return self.task.kind in ("synthetic", "csv")


def _task_defaults(kind):
    """Defaults differ between the bandit tasks and the control task."""
    if kind == "mdp":
        return {"gamma": 0.95, "noise": NoiseSchedule(ADAPTIVE, 1.0, 0.3, 1, 1.3, 1.3),
                "actor_hidden": (100,), "critic_hidden": (100, 40), "deviator_hidden": (100, 40)}
    return {"gamma": 0.0, "noise": NoiseSchedule(LINEAR_DECAY, 1.0, 0.1, 100_000),
            "actor_hidden": (300, 100), "critic_hidden": (100, 10), "deviator_hidden": (300, 100)}


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Build a validated config from INI text."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";;"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    try:
        t = sec("task")
        kind = t.get("kind", "synthetic")
        if kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {kind!r}")
        dflt = _task_defaults(kind)
        task = TaskSpec(kind=kind)
        for f in ("m", "d", "n_points", "feature_dim", "label_dim", "horizon", "test_states"):
            if f in t:
                setattr(task, f, int(t[f]))
        for f in ("hidden_complexity", "test_fraction", "noise", "init_scale"):
            if f in t:
                setattr(task, f, float(t[f]))
        if "seed" in t:
            task.task_seed = int(t["seed"])
        if "goal_radius" in t and t["goal_radius"].strip().lower() not in ("", "none"):
            task.goal_radius = float(t["goal_radius"])
        if "path" in t:
            p = Path(t["path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            task.path = str(p)
        for f in ("A", "B", "P", "R"):
            if f in t:
                setattr(task, f, _matrix(t[f]))

        a = sec("algorithm")
        n = sec("networks")
        o = sec("optimizer")
        z = sec("noise")
        rp = sec("replay")
        r = sec("run")

        hyper = dac.Hyper(
            gamma=float(a.get("gamma", dflt["gamma"])),
            actor_step=float(o.get("actor_step", 1e-4)),
            critic_step=float(o.get("critic_step", 1e-4)),
            deviator_step=float(o["deviator_step"]) if "deviator_step" in o else None,
            optimizer=o.get("mode", "rmsprop"),
            ms_decay=float(o.get("ms_decay", 0.9)),
            momentum=float(o.get("momentum", 0.9)),
            epsilon_fuzz=float(o.get("epsilon_fuzz", 1e-8)),
            replay_noise=rp.get("noise", dac.RECORDED),
        )
        nd = dflt["noise"]
        noise = NoiseSchedule(
            mode=z.get("mode", nd.mode),
            sigma2_init=float(z.get("sigma2_init", nd.sigma2_init)),
            sigma2_floor=float(z.get("sigma2_floor", nd.sigma2_floor)),
            decay_steps=int(z.get("decay_steps", nd.decay_steps)),
            grow_factor=float(z.get("grow_factor", nd.grow_factor)),
            shrink_factor=float(z.get("shrink_factor", nd.shrink_factor)),
        )
        total = r.get("total_steps")
        cfg = ExperimentConfig(
            task=task,
            algorithm=a.get("name", "gprop"),
            actor_hidden=_ints(n.get("actor_hidden", " ".join(map(str, dflt["actor_hidden"])))),
            critic_hidden=_ints(n.get("critic_hidden", " ".join(map(str, dflt["critic_hidden"])))),
            deviator_hidden=_ints(n.get("deviator_hidden", " ".join(map(str, dflt["deviator_hidden"])))),
            actor_activation=n.get("actor_activation", nc.RECTIFIER),
            critic_activation=n.get("critic_activation", nc.RECTIFIER),
            deviator_activation=n.get("deviator_activation", nc.RECTIFIER),
            hyper=hyper,
            noise=noise,
            replay_capacity=int(rp.get("capacity", 100_000)),
            batch_size=int(rp.get("batch_size", 32)),
            clone_period=int(rp.get("clone_period", 1000)),
            warmup=int(rp.get("warmup", rp.get("batch_size", 32))),
            total_steps=int(total) if total is not None else None,
            eval_period=int(r.get("eval_period", 1000)),
            eval_points=int(r["eval_points"]) if "eval_points" in r else None,
            seed=int(r.get("seed", 0)),
            out=r.get("out") or None,
            record_wall_time=r.get("record_wall_time", "false").strip().lower() in ("1", "true", "yes"),
        )
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base_dir=path.parent)


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg.algorithm!r}; expected one of {ALGORITHMS}")
    if cfg.task.kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {cfg.task.kind!r}")
    if cfg.algorithm == "supervised-backprop" and not cfg.is_bandit:
        raise ConfigError("supervised-backprop needs a bandit task with labels")
    if cfg.total_steps is None:
        raise ConfigError("run.total_steps is required")
    if cfg.total_steps < 0 or cfg.eval_period < 1 or cfg.batch_size < 1 or cfg.warmup < 1:
        raise ConfigError("total_steps must be >= 0; eval_period, batch_size, warmup >= 1")
    if cfg.replay_capacity < 1 or cfg.clone_period < 1:
        raise ConfigError("replay capacity and clone period must be positive")
    for act in (cfg.actor_activation, cfg.critic_activation, cfg.deviator_activation):
        if act not in nc.KINDS:
            raise ConfigError(f"unknown activation {act!r}")
    t = cfg.task
    if t.kind == "csv":
        if not t.path or not Path(t.path).is_file():
            raise ConfigError(f"task csv {t.path!r} does not exist")
    elif t.kind == "mdp":
        for name in ("A", "B", "P", "R"):
            if getattr(t, name) is None:
                raise ConfigError(f"mdp task needs matrix {name}")
        try:
            build_mdp(cfg)
        except (ShapeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    if cfg.is_bandit and cfg.hyper.gamma != 0.0:
        raise ConfigError("bandit tasks are not sequential; gamma must be 0")


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Fully resolved config in the same INI dialect ``parse_config`` reads."""
    t = cfg.task
    cp = configparser.ConfigParser()
    task = {"kind": t.kind}
    if t.kind == "synthetic":
        task.update(m=t.m, d=t.d, hidden_complexity=repr(t.hidden_complexity), n_points=t.n_points,
                    test_fraction=repr(t.test_fraction))
    elif t.kind == "csv":
        task.update(path=t.path, feature_dim=t.feature_dim, label_dim=t.label_dim,
                    test_fraction=repr(t.test_fraction))
    else:
        task.update(A=_fmt_matrix(t.A), B=_fmt_matrix(t.B), P=_fmt_matrix(t.P), R=_fmt_matrix(t.R),
                    noise=repr(t.noise), horizon=t.horizon, init_scale=repr(t.init_scale),
                    goal_radius="none" if t.goal_radius is None else repr(t.goal_radius),
                    test_states=t.test_states)
    if t.task_seed is not None:
        task["seed"] = t.task_seed
    cp["task"] = {k: str(v) for k, v in task.items()}
    cp["algorithm"] = {"name": cfg.algorithm, "gamma": repr(cfg.hyper.gamma)}
    cp["networks"] = {
        "actor_hidden": " ".join(map(str, cfg.actor_hidden)),
        "critic_hidden": " ".join(map(str, cfg.critic_hidden)),
        "deviator_hidden": " ".join(map(str, cfg.deviator_hidden)),
        "actor_activation": cfg.actor_activation, "critic_activation": cfg.critic_activation,
        "deviator_activation": cfg.deviator_activation}
    h = cfg.hyper
    opt = {"mode": h.optimizer, "actor_step": repr(h.actor_step), "critic_step": repr(h.critic_step),
           "ms_decay": repr(h.ms_decay), "momentum": repr(h.momentum),
           "epsilon_fuzz": repr(h.epsilon_fuzz)}
    if h.deviator_step is not None:
        opt["deviator_step"] = repr(h.deviator_step)
    cp["optimizer"] = opt
    z = cfg.noise
    cp["noise"] = {"mode": z.mode, "sigma2_init": repr(z.sigma2_init),
                   "sigma2_floor": repr(z.sigma2_floor), "decay_steps": str(z.decay_steps),
                   "grow_factor": repr(z.grow_factor), "shrink_factor": repr(z.shrink_factor)}
    cp["replay"] = {"capacity": str(cfg.replay_capacity), "batch_size": str(cfg.batch_size),
                    "clone_period": str(cfg.clone_period), "warmup": str(cfg.warmup),
                    "noise": h.replay_noise}
    run = {"total_steps": str(cfg.total_steps), "eval_period": str(cfg.eval_period),
           "seed": str(cfg.seed), "record_wall_time": str(cfg.record_wall_time).lower()}
    if cfg.eval_points is not None:
        run["eval_points"] = str(cfg.eval_points)
    if cfg.out:
        run["out"] = cfg.out
    cp["run"] = run
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# -- builders -----------------------------------------------------------------

def _task_seed(cfg):
    return cfg.seed if cfg.task.task_seed is None else cfg.task.task_seed


def build_task(cfg: ExperimentConfig) -> envs.BanditTask:
    t = cfg.task
    if t.kind == "synthetic":
        return envs.synthetic_bandit(t.m, t.d, t.hidden_complexity, t.n_points, _task_seed(cfg),
                                     t.test_fraction)
    if t.kind == "csv":
        return envs.load_regression_csv(t.path, t.feature_dim, t.label_dim, t.test_fraction,
                                        _task_seed(cfg))
    raise ConfigError("not a bandit task")


def build_mdp(cfg: ExperimentConfig) -> envs.QuadraticMdp:
    t = cfg.task
    return envs.QuadraticMdp(t.A, t.B, t.P, t.R, cfg.hyper.gamma, t.noise, t.horizon,
                             t.init_scale, t.goal_radius)


def _kinds(hidden, activation):
    return (activation,) * len(hidden) + (nc.LINEAR,)


def build_model(cfg: ExperimentConfig, state_dim: int, action_dim: int, seed: int):
    ak = _kinds(cfg.actor_hidden, cfg.actor_activation)
    ck = _kinds(cfg.critic_hidden, cfg.critic_activation)
    if cfg.algorithm == "copdac-q":
        return dac.make_copdac_model(state_dim, action_dim, cfg.actor_hidden, cfg.critic_hidden,
                                     seed, cfg.clone_period, ak, ck)
    return dac.make_dac_model(state_dim, action_dim, cfg.actor_hidden, cfg.critic_hidden,
                              cfg.deviator_hidden, seed, cfg.clone_period, ak, ck,
                              _kinds(cfg.deviator_hidden, cfg.deviator_activation))


_STEPS = {"gprop": dac.gprop_step, "gprop-explicit": dac.explicit_gprop_step,
          "copdac-q": dac.copdac_q_step}


def gradient_estimate(model, S) -> np.ndarray:
    if isinstance(model, dac.CopdacModel):
        return dac.copdac_gradient_estimate(model, S)
    return dac.deviator_estimate(model, S)


def affine_policy(actor: nc.RectifierNet):
    """``(K, c)`` with ``mu(s) = K s + c`` for an all-linear actor, else ``None``."""
    if any(k != nc.LINEAR for k in actor.kinds):
        return None
    m = actor.input_dim
    out = nc.predict(actor, np.vstack([np.zeros(m), np.eye(m)]))
    c = out[0]
    return (out[1:] - c).T, c


# -- evaluation ---------------------------------------------------------------

def _eval_idx(task, cfg):
    idx = task.test_idx if task.test_idx.size else task.train_idx
    if cfg.eval_points is not None:
        idx = idx[:cfg.eval_points]
    return idx


def evaluate_bandit(model, task, idx, with_gradient=True) -> tuple[float, float | None]:
    """Test MSE with noise-free actions, and gradient NMSE against the hidden labels."""
    S = task.X[idx]
    mu = nc.predict(model.actor, S)
    mse = envs.test_mse(task, mu, idx)
    if not with_gradient:
        return mse, None
    G = gradient_estimate(model, S)
    true = envs.bandit_true_gradients(task, idx, mu)
    return mse, float(np.mean(np.sum((G - true) ** 2, axis=1)) / task.action_dim)


def mdp_gradient_errors(model, env, states):
    """Per-state squared error and relative error of the gradient estimate vs the oracle."""
    pol = affine_policy(model.actor)
    if pol is None:
        return None, None
    K, c = pol
    mu = nc.predict(model.actor, states)
    G = gradient_estimate(model, states)
    true = np.stack([envs.mdp_true_q_gradient(env, K, s, a, c) for s, a in zip(states, mu)])
    sq = np.sum((G - true) ** 2, axis=1) / env.action_dim
    rel = np.linalg.norm(G - true, axis=1) / np.maximum(np.linalg.norm(true, axis=1), 1e-300)
    return sq, rel


def _num(x):
    return None if x is None else float(x)


# -- training loops -----------------------------------------------------------

class _Recorder:
    def __init__(self, cfg):
        self.cfg = cfg
        self.records: list[MetricsRecord] = []
        self.t0 = time.perf_counter()
        self.xi_sum = 0.0
        self.xi_n = 0

    def add_xi(self, xi):
        self.xi_sum += xi
        self.xi_n += 1

    def emit(self, step, **kw):
        wall = int((time.perf_counter() - self.t0) * 1000) if self.cfg.record_wall_time else 0
        mean_xi = self.xi_sum / self.xi_n if self.xi_n else None
        self.xi_sum, self.xi_n = 0.0, 0
        rec = MetricsRecord(step=int(step), mean_xi=_num(mean_xi), wall_ms=wall,
                            **{k: _num(v) for k, v in kw.items()})
        self.records.append(rec)
        log.info("step %d %s", step, kw)
        return rec


def _rngs(seed):
    ss = np.random.SeedSequence(seed)
    model_seed, replay_seed, env_seed, test_seed = ss.generate_state(4)
    return int(model_seed), int(replay_seed), np.random.default_rng(env_seed), int(test_seed)


def _eval_steps(total, period):
    steps = list(range(0, total + 1, period))
    if steps[-1] != total:
        steps.append(total)
    return set(steps)


def _train_bandit_rl(cfg, task, model, rng, replay, rec):
    """Bandit interaction loop; the learner sees contexts and rewards only."""
    step_fn = _STEPS[cfg.algorithm]
    train_idx = task.train_idx
    eval_idx = _eval_idx(task, cfg)
    evals = _eval_steps(cfg.total_steps, cfg.eval_period)
    last_good = model.copy()
    mse, gn = evaluate_bandit(model, task, eval_idx)
    rec.emit(0, test_mse=mse, grad_nmse=gn, sigma2=noise_sigma(cfg.noise, 0))
    for t in range(cfg.total_steps):
        sigma2 = noise_sigma(cfg.noise, t)
        i = int(train_idx[rng.integers(train_idx.size)])
        s = task.context(i)
        a, eps = dac.act(model, s, sigma2, rng)
        r = envs.bandit_reward(task, i, a)
        replay.push(dac.Transition(s, a, eps, r, s, True))
        if len(replay) >= cfg.warmup:
            try:
                rec.add_xi(step_fn(model, replay.sample_batch(cfg.batch_size), cfg.hyper))
            except NumericError as exc:
                raise NumericAbort(f"step {t}: {exc}", last_good) from exc
        if t + 1 in evals:
            mse, gn = evaluate_bandit(model, task, eval_idx)
            rec.emit(t + 1, test_mse=mse, grad_nmse=gn, sigma2=noise_sigma(cfg.noise, t + 1))
            if np.isfinite(mse):
                last_good = model.copy()
    return model


def _train_mdp(cfg, env, model, rng, replay, rec, test_states):
    step_fn = _STEPS[cfg.algorithm]
    evals = _eval_steps(cfg.total_steps, cfg.eval_period)
    last_good = model.copy()

    def grad_metric():
        sq, _ = mdp_gradient_errors(model, env, test_states)
        return None if sq is None else float(np.mean(sq))

    rec.emit(0, grad_nmse=grad_metric(), sigma2=noise_sigma(cfg.noise, 0))
    s = envs.mdp_reset(env, rng)
    ep_t, ep_r = 0, 0.0
    ep_steps, ep_rewards = [], []
    for t in range(cfg.total_steps):
        sigma2 = noise_sigma(cfg.noise, t)
        a, eps = dac.act(model, s, sigma2, rng)
        s2, r, done = envs.mdp_step(env, s, a, rng, ep_t)
        # the horizon is a time limit, so the transition still bootstraps
        replay.push(dac.Transition(s, a, eps, r, s2, False))
        if len(replay) >= cfg.warmup:
            try:
                rec.add_xi(step_fn(model, replay.sample_batch(cfg.batch_size), cfg.hyper))
            except NumericError as exc:
                raise NumericAbort(f"step {t}: {exc}", last_good) from exc
        ep_t += 1
        ep_r += r
        s = s2
        if done:
            # without a goal there is no hit/miss signal, so the variance stays put
            hit = None if env.goal_radius is None else float(np.linalg.norm(s2)) < env.goal_radius
            noise_sigma(cfg.noise, t + 1, hit)
            ep_steps.append(ep_t)
            ep_rewards.append(ep_r / ep_t)
            s = envs.mdp_reset(env, rng)
            ep_t, ep_r = 0, 0.0
        if t + 1 in evals:
            rec.emit(t + 1, grad_nmse=grad_metric(), sigma2=noise_sigma(cfg.noise, t + 1),
                     steps_per_episode=np.mean(ep_steps) if ep_steps else None,
                     reward_per_step=np.mean(ep_rewards) if ep_rewards else None)
            ep_steps, ep_rewards = [], []
            if np.all(np.isfinite(model.actor.params)):
                last_good = model.copy()
    return model


def _train_supervised(cfg, task, actor, rng, rec):
    """Full-information backprop on the actor with squared loss against the labels."""
    train_idx = task.train_idx
    eval_idx = _eval_idx(task, cfg)
    evals = _eval_steps(cfg.total_steps, cfg.eval_period)
    h = cfg.hyper
    opt = {}

    def mse():
        return envs.test_mse(task, nc.predict(actor, task.X[eval_idx]), eval_idx)

    rec.emit(0, test_mse=mse())
    for t in range(cfg.total_steps):
        idx = train_idx[rng.integers(train_idx.size, size=cfg.batch_size)]
        mu, tr = nc.forward_batch(actor, task.X[idx])
        direction = nc.backward_batch(actor, tr, task.Y[idx] - mu)
        if h.optimizer == "sgd":
            actor.params += h.actor_step * direction
        else:
            st = opt.setdefault("actor", RmsPropState(actor.n_params, h.actor_step, h.ms_decay,
                                                      h.momentum, h.epsilon_fuzz))
            rmsprop_inplace(st, actor.params, direction, ascend=True)
        if t + 1 in evals:
            rec.emit(t + 1, test_mse=mse())
    return actor


def _write_metrics(out: Path, records):
    rows = [asdict(r) for r in records]
    with open(out / "metrics.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow(["" if row[k] is None else repr(row[k]) for k in METRIC_FIELDS])


@dataclass
class RunResult:
    records: list[MetricsRecord]
    model: object
    out: Path | None = None


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Train ``cfg.algorithm`` on ``cfg.task``; writes outputs when ``cfg.out`` is set."""
    validate_config(cfg)
    cfg = replace(cfg, noise=replace(cfg.noise, current=None))
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.ini").write_text(config_to_ini(cfg))
    model_seed, replay_seed, rng, test_seed = _rngs(cfg.seed)
    rec = _Recorder(cfg)
    replay = dac.ReplayBuffer(cfg.replay_capacity, replay_seed)
    task = None
    try:
        if cfg.is_bandit:
            task = build_task(cfg)
            if out is not None:
                envs.save_manifest(task, out / "task_manifest.json")
            if cfg.algorithm == "supervised-backprop":
                actor = nc.init_network([task.state_dim, *cfg.actor_hidden, task.action_dim],
                                        _kinds(cfg.actor_hidden, cfg.actor_activation),
                                        int(np.random.SeedSequence(model_seed).generate_state(1)[0]))
                model = _train_supervised(cfg, task, actor, rng, rec)
            else:
                model = build_model(cfg, task.state_dim, task.action_dim, model_seed)
                model = _train_bandit_rl(cfg, task, model, rng, replay, rec)
        else:
            env = build_mdp(cfg)
            test_states = env.init_scale * np.random.default_rng(test_seed).standard_normal(
                (cfg.task.test_states, env.state_dim))
            model = build_model(cfg, env.state_dim, env.action_dim, model_seed)
            model = _train_mdp(cfg, env, model, rng, replay, rec, test_states)
    except NumericAbort as exc:
        if out is not None:
            _write_metrics(out, rec.records)
            last_good = exc.args[1] if len(exc.args) > 1 else None
            if last_good is not None:
                dac.save_checkpoint(out / "checkpoint.npz", last_good, None,
                                    {"algorithm": cfg.algorithm, "aborted": True})
        raise
    if out is not None:
        _write_metrics(out, rec.records)
        extra = {"algorithm": cfg.algorithm, "step": cfg.total_steps}
        if isinstance(model, nc.RectifierNet):
            nc.save_network(model, out / "actor.gpnet")
        else:
            dac.save_checkpoint(out / "checkpoint.npz", model, rng, extra)
    return RunResult(rec.records, model, out)


def supervised_baseline(cfg: ExperimentConfig) -> RunResult:
    """Supervised backprop on the same actor architecture, task and step budget."""
    return run_experiment(replace(cfg, algorithm="supervised-backprop"))


def _replica_worker(cfg):
    return run_experiment(cfg).out


def replica_configs(cfg: ExperimentConfig, k: int) -> list[ExperimentConfig]:
    base = Path(cfg.out or "runs")
    return [replace(cfg, seed=cfg.seed + i, out=str(base / f"replica_{i}")) for i in range(k)]


def run_replicas(cfg: ExperimentConfig, k: int, threads: int | None = None) -> list[Path]:
    """Independent seeded runs; at most ``GRADPROP_THREADS`` in parallel."""
    threads = threads or max_threads()
    cfgs = replica_configs(cfg, k)
    if threads <= 1 or k == 1:
        return [_replica_worker(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=min(threads, k)) as ex:
        return list(ex.map(_replica_worker, cfgs))


def max_threads() -> int:
    try:
        return max(1, int(os.environ.get("GRADPROP_THREADS", "1")))
    except ValueError:
        return 1


# -- gradient report ----------------------------------------------------------

def gradcheck_report(checkpoint, task, n_points: int, out=None) -> dict:
    """Distribution of per-point gradient NMSE on held-out contexts.

    ``task`` is a ``BanditTask`` or the path of a task manifest.
    """
    if isinstance(checkpoint, (dac.DacModel, dac.CopdacModel)):
        model = checkpoint
    else:
        model = dac.load_checkpoint(checkpoint)[0]
    if not isinstance(task, envs.BanditTask):
        task = envs.task_from_manifest(json.loads(Path(task).read_text()))
    if model.state_dim != task.state_dim or model.action_dim != task.action_dim:
        raise ShapeError(f"model dims ({model.state_dim}, {model.action_dim}) do not match task "
                         f"({task.state_dim}, {task.action_dim})")
    idx = task.test_idx if task.test_idx.size else task.train_idx
    if n_points > idx.size:
        warnings.warn(f"requested {n_points} points but only {idx.size} held-out contexts; clamping")
        n_points = idx.size
    idx = idx[:n_points]
    S = task.X[idx]
    mu = nc.predict(model.actor, S)
    G = gradient_estimate(model, S)
    per_point = np.sum((G - envs.bandit_true_gradients(task, idx, mu)) ** 2, axis=1) / task.action_dim
    summary = {"n_points": int(n_points), "mean": float(np.mean(per_point)),
               "median": float(np.median(per_point)), "p95": float(np.percentile(per_point, 95))}
    if out is not None:
        out = Path(out)
        new = not out.exists()
        with open(out, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(list(summary))
            w.writerow([repr(v) for v in summary.values()])
    summary["per_point"] = per_point
    return summary
