"""Variance-exploding noise schedule, probability-flow drift and analytic scores.

Score functions operate on plain arrays of any shape (the image shape). Probe
arguments of ``vjp``/``jvp``/``div_grad`` may carry one extra leading batch
axis, one row per probe vector.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    t_end: float = 1.0

    def __post_init__(self):
        if not (self.sigma_min > 0 and self.sigma_max > self.sigma_min):
            raise ValueError(
                f"invalid schedule: need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )
        if self.t_end != 1.0:
            raise ValueError("the time horizon is fixed at T = 1")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def _check_t(self, t: float) -> None:
        if not (0.0 <= t <= self.t_end):
            raise ValueError(f"t must lie in [0, {self.t_end}], got {t}")

    def sigma(self, t: float) -> float:
        self._check_t(t)
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def diffusion_g(self, t: float) -> float:
        return self.sigma(t) * math.sqrt(2.0 * self.log_ratio)

    def g2(self, t: float) -> float:
        """Squared diffusion coefficient, d sigma(t)^2 / dt."""
        return 2.0 * self.log_ratio * self.sigma(t) ** 2


def sigma(schedule: NoiseSchedule, t: float) -> float:
    return schedule.sigma(t)


def diffusion_g(schedule: NoiseSchedule, t: float) -> float:
    return schedule.diffusion_g(t)


class ScoreFunction(ABC):
    """Map (x, t) to an approximation of grad_x log p_t(x)."""

    @abstractmethod
    def __call__(self, x: np.ndarray, t: float) -> np.ndarray: ...

    @abstractmethod
    def vjp(self, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        """v^T (d score / dx), batched over a leading probe axis if present."""

    def jvp(self, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        # Exact scores are gradients, so their Jacobians are symmetric.
        return self.vjp(x, t, v)

    @abstractmethod
    def div_grad(self, x: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
        """grad_x of sum_m eps_m^T (d score / dx) eps_m."""

    def score_and_jvp(self, x, t, v):
        return self(x, t), self.jvp(x, t, v)

    def score_and_combined_vjp(self, x, t, cotangent, eps, weight=1.0):
        """Return s(x, t) and grad_x [cotangent . s + weight * sum_m eps_m^T J eps_m]."""
        return self(x, t), self.vjp(x, t, cotangent) + weight * self.div_grad(x, t, eps)


class ZeroScore(ScoreFunction):
    def __call__(self, x, t):
        return np.zeros_like(x, dtype=np.float64)

    def vjp(self, x, t, v):
        return np.zeros_like(v, dtype=np.float64)

    def div_grad(self, x, t, eps):
        return np.zeros_like(x, dtype=np.float64)


class GaussianScore(ScoreFunction):
    """Exact score of N(mean, s^2 I) data pushed through the VE perturbation."""

    def __init__(self, mean, variance_data: float, schedule: NoiseSchedule):
        if variance_data < 0:
            raise ValueError("variance_data must be non-negative")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance_data = float(variance_data)
        self.schedule = schedule

    def variance(self, t: float) -> float:
        s = self.schedule
        return self.variance_data + s.sigma(t) ** 2 - s.sigma_min**2

    def __call__(self, x, t):
        return -(np.asarray(x, dtype=np.float64) - self.mean) / self.variance(t)

    def vjp(self, x, t, v):
        return -np.asarray(v, dtype=np.float64) / self.variance(t)

    def div_grad(self, x, t, eps):
        return np.zeros(np.shape(x))

    def logp(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        var = self.variance(t)
        d = x.size
        r = x - self.mean
        return -0.5 * d * math.log(2 * math.pi * var) - 0.5 * float(np.sum(r * r)) / var


class GaussianMixtureScore(ScoreFunction):
    """Exact score of an isotropic Gaussian mixture under the VE perturbation.

    ``components`` is a sequence of ``(weight, mean, variance_data)``.
    """

    def __init__(self, components: Sequence[tuple[float, np.ndarray, float]], schedule: NoiseSchedule):
        if not components:
            raise ValueError("mixture needs at least one component")
        weights = np.array([c[0] for c in components], dtype=np.float64)
        if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        self.shape = np.shape(components[0][1])
        self.weights = weights
        self.means = np.stack([np.broadcast_to(np.asarray(c[1], dtype=np.float64), self.shape).ravel()
                               for c in components])
        self.variances_data = np.array([c[2] for c in components], dtype=np.float64)
        self.schedule = schedule
        with np.errstate(divide="ignore"):
            self._log_w = np.log(weights)

    def variances(self, t):
        s = self.schedule
        return self.variances_data + s.sigma(t) ** 2 - s.sigma_min**2

    def _terms(self, x, t):
        xf = np.asarray(x, dtype=np.float64).reshape(-1)
        var = self.variances(t)
        diff = xf[None, :] - self.means
        d = xf.size
        log_comp = self._log_w - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * np.sum(diff * diff, axis=1) / var
        resp = np.exp(log_comp - logsumexp(log_comp))
        comp_scores = -diff / var[:, None]
        mean_score = resp @ comp_scores
        return var, resp, comp_scores, mean_score, log_comp

    def logp(self, x, t):
        return float(logsumexp(self._terms(x, t)[4]))

    def __call__(self, x, t):
        return self._terms(x, t)[3].reshape(np.shape(x))

    def _vjp_flat(self, terms, v):
        var, resp, comp, mean_score, _ = terms
        # v: (m, d)
        out = -v * float(np.sum(resp / var))
        proj = v @ comp.T  # (m, K)
        out += (proj * resp) @ comp
        out -= np.outer(v @ mean_score, mean_score)
        return out

    def vjp(self, x, t, v):
        v = np.asarray(v, dtype=np.float64)
        d = int(np.prod(np.shape(x)))
        flat = v.reshape(-1, d)
        return self._vjp_flat(self._terms(x, t), flat).reshape(v.shape)

    def div_grad(self, x, t, eps):
        terms = self._terms(x, t)
        var, resp, comp, mean_score, _ = terms
        d = int(np.prod(np.shape(x)))
        e = np.asarray(eps, dtype=np.float64).reshape(-1, d)
        centered = comp - mean_score  # grad of responsibilities / resp
        sq = np.sum(e * e, axis=1)  # (m,)
        proj = e @ comp.T  # (m, K)
        je = self._vjp_flat(terms, e)  # (m, d)
        g = -(resp / var * sq.sum()) @ centered
        g += (resp * np.sum(proj**2, axis=0)) @ centered
        g -= 2.0 * (proj @ (resp / var)) @ e
        g -= 2.0 * np.sum((e @ mean_score)[:, None] * je, axis=0)
        return g.reshape(np.shape(x))


def pf_drift(schedule: NoiseSchedule, score: ScoreFunction, x: np.ndarray, t: float) -> np.ndarray:
    """Probability-flow drift for f = 0: -1/2 g(t)^2 s(x, t)."""
    return -0.5 * schedule.g2(t) * score(x, t)


def analytic_logp(dist, x, t: float) -> float:
    """Closed-form log-density of a Gaussian or Gaussian-mixture score's marginal at time t."""
    if not isinstance(dist, (GaussianScore, GaussianMixtureScore)):
        raise TypeError("analytic_logp needs a GaussianScore or GaussianMixtureScore")
    dist.schedule._check_t(t)
    return dist.logp(x, t)
