"""Gradient-based motion compensation over pluggable image objectives."""

from __future__ import annotations

import json
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctrecon.fbp import FBPOperator
from .ctrecon.projector import Sinogram
from .errors import DivergenceError, ScoreMocoError
from .grid import Image, SeededRng
from .motion import MotionSpline, gamma_gradient, unpack
from .pfode import OdeConfig, TraceEstimatorConfig, log_likelihood
from .scorefield import NoiseSchedule, ScoreFunction

log = logging.getLogger(__name__)

MAXIMIZE = "maximize"
MINIMIZE = "minimize"


class Objective(ABC):
    """Image-quality objective returning (value, d value / d image)."""

    orientation: str = MAXIMIZE

    @abstractmethod
    def evaluate(self, image: np.ndarray) -> tuple[float, np.ndarray]: ...


class MSEObjective(Objective):
    orientation = MINIMIZE

    def __init__(self, ground_truth):
        self.ground_truth = np.asarray(getattr(ground_truth, "data", ground_truth), dtype=np.float64)

    def evaluate(self, image):
        x = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if x.shape != self.ground_truth.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {self.ground_truth.shape}")
        diff = x - self.ground_truth
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class LikelihoodObjective(Objective):
    """Probability-flow log-likelihood of the image; fresh probes on every call."""

    orientation = MAXIMIZE

    def __init__(self, score: ScoreFunction, schedule: NoiseSchedule, ode: OdeConfig,
                 trace: TraceEstimatorConfig, intensity_scale: float = 1.0, intensity_offset: float = 0.0):
        self.score = score
        self.schedule = schedule
        self.ode = ode
        self.trace = trace
        self.intensity_scale = intensity_scale
        self.intensity_offset = intensity_offset
        self.calls = 0
        self.last_result = None

    def trace_for_call(self, index: int) -> TraceEstimatorConfig:
        return self.trace.with_rng(self.trace.rng.spawn(index))

    def evaluate(self, image):
        x = np.asarray(getattr(image, "data", image), dtype=np.float64)
        trace = self.trace_for_call(self.calls)
        self.calls += 1
        z = self.intensity_scale * x + self.intensity_offset
        res = log_likelihood(self.score, self.schedule, self.ode, trace, z, want_gradient=True)
        self.last_result = res
        return res.logp, self.intensity_scale * res.gradient


def mse_objective(ground_truth) -> MSEObjective:
    return MSEObjective(ground_truth)


def likelihood_objective(score, schedule, ode_config, trace_config, **kw) -> LikelihoodObjective:
    return LikelihoodObjective(score, schedule, ode_config, trace_config, **kw)


@dataclass
class OptimizerConfig:
    iterations: int = 40
    r0: float = 100.0
    q: float = 0.97
    seed: int = 0
    nodes: int = 30
    calibrate_step: float | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("q must lie in (0, 1]")
        if self.calibrate_step is not None and not self.calibrate_step > 0:
            raise ValueError("calibrate_step must be positive")


def step_size(config: OptimizerConfig, n: int) -> float:
    if n < 0:
        raise ValueError("iteration index must be >= 0")
    return config.r0 * config.q**n


def step(gamma, gradient, r_n: float, orientation: str = MAXIMIZE) -> np.ndarray:
    """gamma + r_n * g for maximisation, gamma - r_n * g for minimisation."""
    gamma = np.asarray(gamma, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if gamma.shape != gradient.shape:
        raise ValueError("gamma and gradient shapes differ")
    if not np.all(np.isfinite(gradient)):
        raise DivergenceError("non-finite gradient")
    sign = 1.0 if orientation == MAXIMIZE else -1.0
    if orientation not in (MAXIMIZE, MINIMIZE):
        raise ValueError(f"unknown orientation {orientation!r}")
    return gamma + sign * r_n * gradient


@dataclass
class OptTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    @property
    def values(self) -> np.ndarray:
        return np.array([r["value"] for r in self.records])

    def write_jsonl(self, path, wall_time: bool = False) -> None:
        """One JSON record per iteration; wall times are dropped unless asked for,
        so that reruns reproduce the file byte for byte."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                if not wall_time:
                    r = {k: v for k, v in r.items() if k != "wall_time"}
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "OptTrace":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


@dataclass
class CompensationResult:
    gamma: np.ndarray
    image: Image
    trace: OptTrace
    status: str = "ok"
    r0_effective: float = 0.0
    n_views: int = 360

    @property
    def spline(self) -> MotionSpline:
        return unpack(self.gamma, self.gamma.size // 3, self.n_views)


def objective_and_gamma_grad(op: FBPOperator, objective: Objective, gamma: np.ndarray, n_nodes: int):
    """Reconstruct at gamma, evaluate the objective and chain its gradient into gamma."""
    n_views = op.geometry.n_views
    motion = unpack(gamma, n_nodes, n_views).per_view_radians()
    image = op.reconstruct(motion)
    value, grad_img = objective.evaluate(image.data)
    per_view = op.vjp(motion, grad_img)
    return value, gamma_gradient(n_nodes, n_views, per_view), image


def compensate(sinogram: Sinogram, objective: Objective, config: OptimizerConfig, shape, spacing: float,
               operator: FBPOperator | None = None) -> CompensationResult:
    """Gradient ascent/descent on spline motion parameters starting at gamma = 0.

    Each iteration reconstructs the sinogram along the current trajectory,
    evaluates the objective and its image gradient, propagates that gradient
    to the spline nodes and takes one decaying-step update.
    """
    op = operator or FBPOperator(sinogram, shape, spacing)
    n_nodes = config.nodes
    gamma = np.zeros(3 * n_nodes)
    trace = OptTrace()
    sign = 1.0 if objective.orientation == MAXIMIZE else -1.0
    best = (-math.inf, gamma.copy(), None)
    r0 = config.r0
    status = "ok"
    image = None
    t_start = time.perf_counter()
    for n in range(config.iterations + 1):
        try:
            value, grad, image = objective_and_gamma_grad(op, objective, gamma, n_nodes)
            if not (math.isfinite(value) and np.all(np.isfinite(grad))):
                raise DivergenceError(f"non-finite objective or gradient at iteration {n}", step=n)
        except (ScoreMocoError, FloatingPointError, ValueError) as exc:
            log.warning("objective failed at iteration %d: %s", n, exc)
            status = "degraded"
            break
        if n == 0 and config.calibrate_step is not None:
            gmax = float(np.max(np.abs(grad)))
            r0 = config.calibrate_step / gmax if gmax > 0 else config.r0
        if sign * value > best[0]:
            best = (sign * value, gamma.copy(), image)
        r_n = r0 * config.q**n
        trace.append(iteration=n, gamma=gamma.tolist(), value=float(value), step_size=float(r_n),
                     grad_norm=float(np.linalg.norm(grad)), wall_time=time.perf_counter() - t_start)
        if n < config.iterations:
            gamma = step(gamma, grad, r_n, objective.orientation)
    if status != "ok":
        gamma = best[1]
        image = best[2] if best[2] is not None else op.reconstruct(unpack(gamma, n_nodes, op.geometry.n_views)
                                                                    .per_view_radians())
    return CompensationResult(gamma, image, trace, status, r0, op.geometry.n_views)
