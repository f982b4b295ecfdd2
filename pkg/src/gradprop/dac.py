"""Deviator-actor-critic model, GProp updates, COPDAC-Q, replay and cloning.

Update steps mutate the model in place and return the batch-mean TD(G)-error.
Copy the model first (``model.copy()``) when the pre-update state is needed.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netcore as nc
from .errors import ConfigError, InputError, NumericError, ShapeError, StateError, UnknownUnitError
from .optim import RmsPropState, rmsprop_inplace

CHECKPOINT_VERSION = 1
RECORDED = "recorded"
RECOMPUTED = "recomputed"


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    eps: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class TransitionBatch:
    S: np.ndarray
    A: np.ndarray
    E: np.ndarray
    R: np.ndarray
    S2: np.ndarray
    T: np.ndarray

    def __len__(self):
        return self.S.shape[0]

    @classmethod
    def from_list(cls, transitions) -> "TransitionBatch":
        if not transitions:
            raise StateError("empty batch")
        return cls(
            np.stack([t.s for t in transitions]).astype(np.float64),
            np.stack([t.a for t in transitions]).astype(np.float64),
            np.stack([t.eps for t in transitions]).astype(np.float64),
            np.array([t.r for t in transitions], dtype=np.float64),
            np.stack([t.s_next for t in transitions]).astype(np.float64),
            np.array([t.terminal for t in transitions], dtype=bool),
        )

    def transitions(self):
        return [Transition(self.S[i], self.A[i], self.E[i], float(self.R[i]), self.S2[i],
                           bool(self.T[i])) for i in range(len(self))]


def as_batch(batch) -> TransitionBatch:
    if isinstance(batch, TransitionBatch):
        if len(batch) == 0:
            raise StateError("empty batch")
        return batch
    if isinstance(batch, Transition):
        batch = [batch]
    return TransitionBatch.from_list(list(batch))


class ReplayBuffer:
    """Fixed-capacity FIFO ring; uniform sampling with replacement."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.rng = np.random.default_rng(seed)
        self._arrays = None
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def _allocate(self, t: Transition):
        c = self.capacity
        self._arrays = TransitionBatch(
            np.empty((c, len(t.s))), np.empty((c, len(t.a))), np.empty((c, len(t.eps))),
            np.empty(c), np.empty((c, len(t.s_next))), np.empty(c, dtype=bool),
        )

    def push(self, t: Transition) -> "ReplayBuffer":
        if self._arrays is None:
            self._allocate(t)
        i = self._next
        arr = self._arrays
        arr.S[i], arr.A[i], arr.E[i] = t.s, t.a, t.eps
        arr.R[i], arr.S2[i], arr.T[i] = t.r, t.s_next, t.terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return self

    def _ordered_indices(self):
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if self._size == 0:
            return []
        return self._take(self._ordered_indices()).transitions()

    def _take(self, idx) -> TransitionBatch:
        a = self._arrays
        return TransitionBatch(a.S[idx], a.A[idx], a.E[idx], a.R[idx], a.S2[idx], a.T[idx])

    def sample_batch(self, k: int) -> TransitionBatch:
        if self._size == 0:
            raise StateError("cannot sample from an empty replay buffer")
        if k < 1:
            raise ConfigError("sample size must be at least 1")
        pos = self.rng.integers(0, self._size, size=k)
        return self._take(self._ordered_indices()[pos])

    def sample(self, k: int) -> list[Transition]:
        return self.sample_batch(k).transitions()


def replay_push(buf: ReplayBuffer, t: Transition) -> ReplayBuffer:
    return buf.push(t)


def replay_sample(buf: ReplayBuffer, k: int) -> list[Transition]:
    return buf.sample(k)


@dataclass
class Hyper:
    """Learning-rule settings shared by GProp and COPDAC-Q.

    ``optimizer="sgd"`` bypasses RMSProp and applies ``params += step * direction``.
    ``deviator_step=None`` ties the deviator's rate to the critic's.
    ``replay_noise="recorded"`` replays the noise drawn when acting;
    ``"recomputed"`` uses ``a - mu(s)`` under the current actor instead.
    """

    gamma: float = 0.0
    actor_step: float = 1e-4
    critic_step: float = 1e-4
    deviator_step: float | None = None
    optimizer: str = "rmsprop"
    ms_decay: float = 0.9
    momentum: float = 0.9
    epsilon_fuzz: float = 1e-8
    replay_noise: str = RECORDED

    def __post_init__(self):
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.replay_noise not in (RECORDED, RECOMPUTED):
            raise ConfigError(f"unknown replay_noise mode {self.replay_noise!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")

    def step_for(self, role: str) -> float:
        if role == "actor":
            return self.actor_step
        if role == "deviator" and self.deviator_step is not None:
            return self.deviator_step
        return self.critic_step


def _apply(opt: dict, role: str, params: np.ndarray, direction: np.ndarray, hyper: Hyper):
    """Move ``params`` (in place) along the ascent ``direction``."""
    if hyper.optimizer == "sgd":
        with np.errstate(over="ignore", invalid="ignore"):
            params += hyper.step_for(role) * direction
        if not np.all(np.isfinite(params)):
            raise NumericError(f"{role} parameters became non-finite")
        return
    state = opt.get(role)
    if state is None:
        state = opt[role] = RmsPropState(params.shape[0], hyper.step_for(role), hyper.ms_decay,
                                         hyper.momentum, hyper.epsilon_fuzz)
    rmsprop_inplace(state, params, direction, ascend=True)


@dataclass(eq=False)
class DacModel:
    actor: nc.RectifierNet
    critic: nc.RectifierNet
    deviator: nc.RectifierNet
    critic_target: nc.RectifierNet
    deviator_target: nc.RectifierNet
    clone_period: int = 1000
    updates: int = 0
    opt: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.actor.output_dim
        m = self.actor.input_dim
        if self.deviator.output_dim != d:
            raise ShapeError("deviator output dim must equal the action dim")
        if self.critic.output_dim != 1:
            raise ShapeError("critic must have a single output")
        for net in (self.critic, self.deviator):
            if net.input_dim != m + d:
                raise ShapeError("critic and deviator take (state, action) inputs")
        if self.critic_target.sizes != self.critic.sizes or self.deviator_target.sizes != self.deviator.sizes:
            raise ShapeError("targets must mirror their source networks")
        if self.clone_period < 1:
            raise ConfigError("clone_period must be positive")

    @property
    def state_dim(self):
        return self.actor.input_dim

    @property
    def action_dim(self):
        return self.actor.output_dim

    def refresh_targets(self):
        self.critic_target = self.critic.copy()
        self.deviator_target = self.deviator.copy()

    def copy(self) -> "DacModel":
        return DacModel(self.actor.copy(), self.critic.copy(), self.deviator.copy(),
                        self.critic_target.copy(), self.deviator_target.copy(),
                        self.clone_period, self.updates,
                        {k: v.copy() for k, v in self.opt.items()})

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "deviator": self.deviator,
                "critic_target": self.critic_target, "deviator_target": self.deviator_target}


def make_dac_model(state_dim, action_dim, actor_hidden=(300, 100), critic_hidden=(100, 10),
                   deviator_hidden=(300, 100), seed=0, clone_period=1000,
                   actor_kinds=None, critic_kinds=None, deviator_kinds=None,
                   zero_output=True) -> DacModel:
    """Fresh actor, critic and deviator.

    With ``zero_output`` the critic and deviator start with a zero output layer, so the
    first actor updates follow a learned gradient rather than the initial random one.
    """
    seeds = np.random.SeedSequence(seed).generate_state(3)
    actor = nc.init_network([state_dim, *actor_hidden, action_dim], actor_kinds, int(seeds[0]))
    critic = nc.init_network([state_dim + action_dim, *critic_hidden, 1], critic_kinds, int(seeds[1]))
    deviator = nc.init_network([state_dim + action_dim, *deviator_hidden, action_dim],
                               deviator_kinds, int(seeds[2]))
    if zero_output:
        for net in (critic, deviator):
            nc.unflatten(net, net.params)[-1][...] = 0.0
    return DacModel(actor, critic, deviator, critic.copy(), deviator.copy(), clone_period)


def act(model, s, sigma2: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``a = mu(s) + eps`` with ``eps ~ N(0, sigma2 I)``; returns ``(a, eps)``."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise InputError("non-finite state")
    mu = nc.predict(model.actor, s)[0]
    z = rng.standard_normal(mu.shape[0])
    a = mu + np.sqrt(sigma2) * z
    return a, a - mu


def deviator_estimate(model: DacModel, S) -> np.ndarray:
    """Deviator's value-gradient estimate ``G(s, mu(s))`` for each row of ``S``."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    mu = nc.predict(model.actor, S)
    return nc.predict(model.deviator, np.hstack([S, mu]))


def _bootstrap(model, b: TransitionBatch, gamma: float) -> np.ndarray:
    boot = np.zeros(len(b))
    live = ~b.T
    if gamma > 0.0 and np.any(live):
        S2 = b.S2[live]
        mu2 = nc.predict(model.actor, S2)
        boot[live] = gamma * nc.predict(model.critic_target, np.hstack([S2, mu2]))[:, 0]
    return boot


def _advance_clone(model):
    model.updates += 1
    if model.updates % model.clone_period == 0:
        model.refresh_targets()


def _check_xi(xi):
    if not np.all(np.isfinite(xi)):
        raise NumericError("non-finite TDG-error; step aborted")


def gprop_directions(model: DacModel, batch, hyper: Hyper):
    """Batch-mean ascent directions for actor, critic and deviator, plus the TDG-errors."""
    b = as_batch(batch)
    mu, tr_a = nc.forward_batch(model.actor, b.S)
    E = b.A - mu if hyper.replay_noise == RECOMPUTED else b.E
    St = np.hstack([b.S, mu])
    q, tr_c = nc.forward_batch(model.critic, St)
    G, tr_d = nc.forward_batch(model.deviator, St)
    xi = b.R + _bootstrap(model, b, hyper.gamma) - np.einsum("bi,bi->b", G, E) - q[:, 0]
    _check_xi(xi)
    d_actor = nc.backward_batch(model.actor, tr_a, G)
    d_critic = nc.backward_batch(model.critic, tr_c, xi[:, None])
    d_dev = nc.backward_batch(model.deviator, tr_d, xi[:, None] * E)
    return d_actor, d_critic, d_dev, xi


def _apply_all(model, dirs, hyper):
    d_actor, d_critic, d_dev = dirs
    _apply(model.opt, "actor", model.actor.params, d_actor, hyper)
    _apply(model.opt, "critic", model.critic.params, d_critic, hyper)
    _apply(model.opt, "deviator", model.deviator.params, d_dev, hyper)
    _advance_clone(model)


def gprop_step(model: DacModel, batch, hyper: Hyper) -> float:
    """One GProp update by whole-network backpropagation of G, xi and xi*eps."""
    d_actor, d_critic, d_dev, xi = gprop_directions(model, batch, hyper)
    _apply_all(model, (d_actor, d_critic, d_dev), hyper)
    return float(np.mean(xi))


def _unit_updates(net: nc.RectifierNet, x, signal) -> np.ndarray:
    """Per-unit rule: active unit j moves by ``<signal, influence_j> * input_j``."""
    _, trace = nc.forward(net, x)
    mats = nc.influence_matrices(net, trace)
    out = np.zeros(net.n_params)
    blocks = nc.unflatten(net, out)
    signal = np.atleast_1d(np.asarray(signal, dtype=np.float64))
    for k, j in net.units():
        if trace.gates[k][j] == 0.0:
            continue
        delta_j = float(np.dot(signal, mats[k][:, j]))
        blocks[k][j, :-1] = delta_j * trace.inputs[k]
        blocks[k][j, -1] = delta_j
    return out


def explicit_gprop_directions(model: DacModel, batch, hyper: Hyper):
    b = as_batch(batch)
    boot = _bootstrap(model, b, hyper.gamma)
    n = len(b)
    d_actor = np.zeros(model.actor.n_params)
    d_critic = np.zeros(model.critic.n_params)
    d_dev = np.zeros(model.deviator.n_params)
    xis = np.empty(n)
    for i in range(n):
        s = b.S[i]
        mu, _ = nc.forward(model.actor, s)
        eps = b.A[i] - mu if hyper.replay_noise == RECOMPUTED else b.E[i]
        st = np.concatenate([s, mu])
        q, _ = nc.forward(model.critic, st)
        g, _ = nc.forward(model.deviator, st)
        xi = b.R[i] + boot[i] - float(np.dot(g, eps)) - q[0]
        xis[i] = xi
        d_actor += _unit_updates(model.actor, s, g)
        d_critic += _unit_updates(model.critic, st, xi)
        d_dev += _unit_updates(model.deviator, st, xi * eps)
    _check_xi(xis)
    return d_actor / n, d_critic / n, d_dev / n, xis


def explicit_gprop_step(model: DacModel, batch, hyper: Hyper) -> float:
    """GProp with every weight update assembled unit by unit from influences."""
    d_actor, d_critic, d_dev, xi = explicit_gprop_directions(model, batch, hyper)
    _apply_all(model, (d_actor, d_critic, d_dev), hyper)
    return float(np.mean(xi))


@dataclass(eq=False)
class CopdacModel:
    """Actor, state-value critic and advantage weights aligned with the actor's parameters."""

    actor: nc.RectifierNet
    critic: nc.RectifierNet
    w: np.ndarray
    critic_target: nc.RectifierNet
    clone_period: int = 1000
    updates: int = 0
    opt: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.w.shape != (self.actor.n_params,):
            raise ShapeError("advantage weights must have one entry per actor parameter")
        if self.critic.input_dim != self.actor.input_dim or self.critic.output_dim != 1:
            raise ShapeError("COPDAC-Q critic maps states to a scalar")
        if self.clone_period < 1:
            raise ConfigError("clone_period must be positive")

    @property
    def state_dim(self):
        return self.actor.input_dim

    @property
    def action_dim(self):
        return self.actor.output_dim

    def refresh_targets(self):
        self.critic_target = self.critic.copy()

    def copy(self) -> "CopdacModel":
        return CopdacModel(self.actor.copy(), self.critic.copy(), self.w.copy(),
                           self.critic_target.copy(), self.clone_period, self.updates,
                           {k: v.copy() for k, v in self.opt.items()})

    def networks(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}


def make_copdac_model(state_dim, action_dim, actor_hidden=(300, 100), critic_hidden=(100, 10),
                      seed=0, clone_period=1000, actor_kinds=None, critic_kinds=None) -> CopdacModel:
    seeds = np.random.SeedSequence(seed).generate_state(3)
    actor = nc.init_network([state_dim, *actor_hidden, action_dim], actor_kinds, int(seeds[0]))
    critic = nc.init_network([state_dim, *critic_hidden, 1], critic_kinds, int(seeds[1]))
    nc.unflatten(critic, critic.params)[-1][...] = 0.0
    return CopdacModel(actor, critic, np.zeros(actor.n_params), critic.copy(), clone_period)


def copdac_gradient_estimate(model: CopdacModel, S) -> np.ndarray:
    """Action-gradient implied by the advantage function, ``J(s)^T w``."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    _, tr = nc.forward_batch(model.actor, S)
    return nc.jvp_batch(model.actor, tr, model.w)


def copdac_q_directions(model: CopdacModel, batch, hyper: Hyper):
    b = as_batch(batch)
    mu, tr_a = nc.forward_batch(model.actor, b.S)
    E = b.A - mu if hyper.replay_noise == RECOMPUTED else b.E
    v, tr_c = nc.forward_batch(model.critic, b.S)
    boot = np.zeros(len(b))
    live = ~b.T
    if hyper.gamma > 0.0 and np.any(live):
        boot[live] = hyper.gamma * nc.predict(model.critic_target, b.S2[live])[:, 0]
    u = nc.jvp_batch(model.actor, tr_a, model.w)  # J^T w per sample
    delta = b.R + boot - v[:, 0] - np.einsum("bi,bi->b", u, E)
    _check_xi(delta)
    d_actor = nc.backward_batch(model.actor, tr_a, u)  # J J^T w
    d_critic = nc.backward_batch(model.critic, tr_c, delta[:, None])
    d_w = nc.backward_batch(model.actor, tr_a, delta[:, None] * E)  # delta J eps
    return d_actor, d_critic, d_w, delta


def copdac_q_step(model: CopdacModel, batch, hyper: Hyper) -> float:
    """One COPDAC-Q update; ``w`` uses the critic's step rate."""
    d_actor, d_critic, d_w, delta = copdac_q_directions(model, batch, hyper)
    _apply(model.opt, "actor", model.actor.params, d_actor, hyper)
    _apply(model.opt, "critic", model.critic.params, d_critic, hyper)
    _apply(model.opt, "w", model.w, d_w, hyper)
    _advance_clone(model)
    return float(np.mean(delta))


def compatibility_check(theta, w, phi, eps) -> tuple[float, float]:
    """Both sides of the minimal-model compatibility identity.

    The deviator ``G(s, eps) = mu(s) * eps * w`` is reparametrized as
    ``w_tilde = w * theta``; lhs is its eps-derivative, rhs is
    ``<grad_theta mu(s), w_tilde>``. Both are linear in eps, so ``eps`` only
    fixes the evaluation point.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    mu = float(np.dot(theta, phi))
    lhs = w * mu  # d/deps of mu * eps * w
    w_tilde = w * theta
    rhs = float(np.dot(phi, w_tilde))  # grad_theta mu(s) = phi(s)
    return lhs, rhs


def local_policy_gradient(model: DacModel, s, unit) -> float:
    """Deviator's directional-derivative estimate along actor unit ``unit``'s influence."""
    mu, trace = nc.forward(model.actor, s)
    try:
        k, j = unit
    except (TypeError, ValueError):
        raise UnknownUnitError(f"bad unit id {unit!r}") from None
    pi = nc.influence(model.actor, trace, (k, j))
    if trace.gates[k][j] == 0.0:
        return 0.0
    g = nc.predict(model.deviator, np.concatenate([np.asarray(s, dtype=np.float64), mu]))[0]
    return float(np.dot(pi, g))


# -- checkpoints --------------------------------------------------------------

def _net_meta(net):
    return {"sizes": list(net.sizes), "kinds": list(net.kinds)}


def save_checkpoint(path, model, rng=None, extra=None) -> None:
    """Write model, optimizer state and RNG state to an ``.npz`` archive."""
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION,
            "model_type": "dac" if isinstance(model, DacModel) else "copdac",
            "clone_period": model.clone_period, "updates": model.updates,
            "networks": {}, "opt": {}, "extra": extra or {},
            "rng": rng.bit_generator.state if rng is not None else None}
    for role, net in model.networks().items():
        meta["networks"][role] = _net_meta(net)
        arrays[f"net/{role}"] = net.params
    if isinstance(model, CopdacModel):
        arrays["w"] = model.w
    for role, st in model.opt.items():
        meta["opt"][role] = {"n": st.n, "step_rate": st.step_rate, "ms_decay": st.ms_decay,
                             "momentum": st.momentum, "epsilon_fuzz": st.epsilon_fuzz}
        arrays[f"opt/{role}/acc"] = st.acc
        arrays[f"opt/{role}/buf"] = st.buf
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, rng_or_None, extra)``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {meta.get('version')}")
        nets = {role: nc.RectifierNet(tuple(m["sizes"]), tuple(m["kinds"]), z[f"net/{role}"])
                for role, m in meta["networks"].items()}
        opt = {role: RmsPropState(o["n"], o["step_rate"], o["ms_decay"], o["momentum"],
                                  o["epsilon_fuzz"], z[f"opt/{role}/acc"].copy(),
                                  z[f"opt/{role}/buf"].copy())
               for role, o in meta["opt"].items()}
        if meta["model_type"] == "dac":
            model = DacModel(nets["actor"], nets["critic"], nets["deviator"],
                             nets["critic_target"], nets["deviator_target"],
                             meta["clone_period"], meta["updates"], opt)
        else:
            model = CopdacModel(nets["actor"], nets["critic"], z["w"].copy(),
                                nets["critic_target"], meta["clone_period"], meta["updates"], opt)
    rng = None
    if meta["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    return model, rng, meta["extra"]
