"""RMSProp with momentum and exploration-noise schedules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass(eq=False)
class RmsPropState:
    """Accumulators for one parameter vector.

    The update is ``acc = decay*acc + (1-decay)*g**2``,
    ``buf = momentum*buf + step_rate*g/sqrt(acc + fuzz)``, then ``params += buf``
    (or ``-=`` when descending).
    """

    n: int
    step_rate: float = 1e-4
    ms_decay: float = 0.9
    momentum: float = 0.9
    epsilon_fuzz: float = 1e-8
    acc: np.ndarray = field(default=None, repr=False)
    buf: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.step_rate > 0:
            raise ConfigError("step_rate must be positive")
        if not 0.0 <= self.ms_decay < 1.0:
            raise ConfigError("ms_decay must lie in [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.epsilon_fuzz > 0:
            raise ConfigError("epsilon_fuzz must be positive")
        if self.acc is None:
            self.acc = np.zeros(self.n)
        if self.buf is None:
            self.buf = np.zeros(self.n)

    def copy(self) -> "RmsPropState":
        return RmsPropState(self.n, self.step_rate, self.ms_decay, self.momentum,
                            self.epsilon_fuzz, self.acc.copy(), self.buf.copy())


def rmsprop_step(state: RmsPropState, params: np.ndarray, grad: np.ndarray,
                 ascend: bool = False) -> tuple[np.ndarray, RmsPropState]:
    """Return updated ``(params, state)``; the inputs are not modified."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or grad.shape != state.acc.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient rejected")
    new = state.copy()
    new.acc = state.ms_decay * state.acc + (1.0 - state.ms_decay) * grad * grad
    new.buf = state.momentum * state.buf + state.step_rate * grad / np.sqrt(new.acc + state.epsilon_fuzz)
    out = params + new.buf if ascend else params - new.buf
    if not np.all(np.isfinite(out)):
        raise NumericError("update produced non-finite parameters")
    return out, new


def rmsprop_inplace(state: RmsPropState, params: np.ndarray, grad: np.ndarray,
                    ascend: bool = False) -> None:
    """Same arithmetic as :func:`rmsprop_step`, mutating ``state`` and ``params``."""
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient rejected")
    acc, buf = state.acc, state.buf
    acc *= state.ms_decay
    acc += (1.0 - state.ms_decay) * grad * grad
    buf *= state.momentum
    buf += state.step_rate * grad / np.sqrt(acc + state.epsilon_fuzz)
    if ascend:
        params += buf
    else:
        params -= buf
    if not np.all(np.isfinite(params)):
        raise NumericError("update produced non-finite parameters")


LINEAR_DECAY = "linear-decay"
ADAPTIVE = "adaptive"


@dataclass
class NoiseSchedule:
    """Exploration variance: linear decay to a floor, or episode-driven ×/÷ updates.

    In adaptive mode ``current`` carries the variance between episodes.
    """

    mode: str = LINEAR_DECAY
    sigma2_init: float = 1.0
    sigma2_floor: float = 0.1
    decay_steps: int = 100_000
    grow_factor: float = 1.3
    shrink_factor: float = 1.3
    current: float | None = None

    def __post_init__(self):
        if self.mode not in (LINEAR_DECAY, ADAPTIVE):
            raise ConfigError(f"unknown noise schedule mode {self.mode!r}")
        if not (self.sigma2_init > 0 and self.sigma2_floor > 0):
            raise ConfigError("noise variances must be positive")
        if self.decay_steps < 1:
            raise ConfigError("decay_steps must be positive")
        if not (self.grow_factor > 0 and self.shrink_factor > 0):
            raise ConfigError("noise factors must be positive")
        if self.current is None:
            self.current = max(self.sigma2_init, self.sigma2_floor)


def noise_sigma(schedule: NoiseSchedule, t: int, episode_feedback: bool | None = None) -> float:
    """Exploration variance at step ``t``.

    Adaptive mode: ``episode_feedback=True`` (target hit within the step limit)
    divides by ``shrink_factor``, ``False`` multiplies by ``grow_factor``,
    ``None`` leaves the variance unchanged. The floor is a hard lower bound.
    """
    if schedule.mode == LINEAR_DECAY:
        frac = min(max(t, 0) / schedule.decay_steps, 1.0)
        val = schedule.sigma2_init + (schedule.sigma2_floor - schedule.sigma2_init) * frac
        return max(val, schedule.sigma2_floor)
    if episode_feedback is True:
        schedule.current = schedule.current / schedule.shrink_factor
    elif episode_feedback is False:
        schedule.current = schedule.current * schedule.grow_factor
    schedule.current = max(schedule.current, schedule.sigma2_floor)
    return schedule.current
