"""Gradient estimation from perturbations and temporal-difference gradient learning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SingularityError


@dataclass
class PerturbationBatch:
    mu: np.ndarray
    eps: np.ndarray
    values: np.ndarray
    sigma2: float

    @property
    def count(self) -> int:
        return self.eps.shape[0]


def sample_perturbations(f, mu, sigma, n, seed=0) -> PerturbationBatch:
    mu = np.asarray(mu, dtype=np.float64)
    rng = np.random.default_rng(seed)
    eps = sigma * rng.standard_normal((n, mu.shape[0]))
    values = np.array([f(mu + e) for e in eps], dtype=np.float64)
    return PerturbationBatch(mu, eps, values, float(sigma) ** 2)


def fit_linear_response(batch: PerturbationBatch) -> tuple[np.ndarray, float]:
    """Least-squares ``(w, b)`` for ``values ~ <w, eps> + b``."""
    n, d = batch.eps.shape
    if n < d + 2:
        raise SingularityError(f"need at least d+2={d + 2} perturbations, got {n}")
    design = np.hstack([batch.eps, np.ones((n, 1))])
    coef, _, rank, sv = np.linalg.lstsq(design, batch.values, rcond=None)
    if rank < d + 1 or sv[-1] <= sv[0] * 1e-12:
        raise SingularityError(f"perturbation design is rank deficient (rank {rank} < {d + 1})")
    return coef[:d], float(coef[d])


def estimate_gradient_at_point(f, mu, sigma, n, seed=0) -> tuple[np.ndarray, float]:
    """Estimate ``grad f(mu)`` and ``f(mu)`` from ``n`` Gaussian perturbations of scale ``sigma``."""
    if not sigma > 0:
        raise SingularityError("perturbation scale must be positive")
    return fit_linear_response(sample_perturbations(f, mu, sigma, n, seed))


@dataclass
class TdgSample:
    r: float
    q_s: float
    q_s_next: float
    g_s: np.ndarray
    eps: np.ndarray
    gamma: float
    terminal: bool = False


def tdg_error(sample: TdgSample) -> float:
    """``r + gamma*Q(s') - <G(s), eps> - Q(s)``; terminal samples drop the bootstrap."""
    g = np.asarray(sample.g_s, dtype=np.float64)
    e = np.asarray(sample.eps, dtype=np.float64)
    if g.shape != e.shape:
        raise ShapeError("deviator output and perturbation differ in shape")
    boot = 0.0 if sample.terminal else sample.gamma * sample.q_s_next
    return float(sample.r + boot - np.dot(g, e) - sample.q_s)


def tdg_linear_update(v, W, xi, eps, phi, psi, eta):
    """One TDG step for linear critic ``<phi, v>`` and deviator ``W @ psi``."""
    v = np.asarray(v, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if phi.shape != v.shape or W.shape != (eps.shape[0], psi.shape[0]):
        raise ShapeError("shapes of v, W, eps, phi, psi do not agree")
    return v + eta * xi * phi, W + eta * xi * np.outer(eps, psi)


def td_error(r, theta, x, x_next, gamma, terminal=False) -> float:
    boot = 0.0 if terminal else gamma * float(np.dot(theta, x_next))
    return float(r + boot - np.dot(theta, x))


def td_linear_update(theta, x, delta, eta):
    """Plain TD(0) step ``theta + eta*delta*x``."""
    return np.asarray(theta, dtype=np.float64) + eta * delta * np.asarray(x, dtype=np.float64)


def extended_features(phi, psi, eps) -> np.ndarray:
    """Stack ``phi`` with the flattened ``eps (x) psi`` so TDG becomes plain TD."""
    return np.concatenate([np.asarray(phi, dtype=np.float64),
                           np.outer(eps, psi).ravel()])
