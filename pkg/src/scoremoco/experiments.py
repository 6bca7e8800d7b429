"""Case-level pipeline shared by the CLI and the acceptance harness.

A case is one seeded phantom: clean image, ground-truth perturbation,
motion-affected sinogram, the motion-free reference reconstruction and the
uncorrected (initial) reconstruction.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .ctrecon import FanBeamGeometry, FBPOperator, PhantomSampler, Sinogram, forward_project, sample_phantom
from .grid import Image, SeededRng
from .metrics import EvalReport, evaluate_case
from .motion import MotionSpline, PerturbationSpec, random_perturbation
from .optimizer import (CompensationResult, Objective, OptimizerConfig, compensate, likelihood_objective,
                        mse_objective)
from .pfode import OdeConfig, TraceEstimatorConfig
from .scorefield import NoiseSchedule, ScoreFunction
from .scorenet import Architecture, ScoreNet, TrainConfig

OBJECTIVES = ("likelihood", "mse-oracle")


def build_geometry(cfg: ExperimentConfig) -> FanBeamGeometry:
    return FanBeamGeometry(**cfg.geometry.model_dump())


def build_schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    return NoiseSchedule(cfg.schedule.sigma_min, cfg.schedule.sigma_max)


def build_ode(cfg: ExperimentConfig) -> OdeConfig:
    return OdeConfig(cfg.ode.forward_steps, cfg.ode.adjoint_steps, cfg.ode.method)


def build_trace(cfg: ExperimentConfig, stream: int = 0) -> TraceEstimatorConfig:
    return TraceEstimatorConfig(cfg.trace.mode, cfg.trace.n_probes, SeededRng(cfg.seeds.trace, stream),
                                cfg.trace.exact_cap)


def build_sampler(cfg: ExperimentConfig) -> PhantomSampler:
    return PhantomSampler(size=cfg.image.size, spacing=cfg.image.spacing_mm,
                          ellipse_count=tuple(cfg.phantom.ellipse_count),
                          intensity_range=tuple(cfg.phantom.intensity_range), skull=cfg.phantom.skull)


def build_training_sampler(cfg: ExperimentConfig):
    """Callable seed -> clean training image, as selected by ``train.data``."""
    sampler = build_sampler(cfg)
    if cfg.train.data == "phantom":
        return sampler
    geometry = build_geometry(cfg)
    shape = (cfg.image.size, cfg.image.size)

    def reconstruction(seed):
        sino = forward_project(sample_phantom(sampler, seed), geometry)
        return FBPOperator(sino, shape, cfg.image.spacing_mm).reconstruct().data

    return reconstruction


def build_optimizer(cfg: ExperimentConfig, seed: int = 0) -> OptimizerConfig:
    o = cfg.optimizer
    return OptimizerConfig(o.iterations, o.r0, o.q, seed, cfg.spline.nodes, o.calibrate_step)


def build_architecture(cfg: ExperimentConfig) -> Architecture:
    return Architecture(channels=cfg.scorenet.channels, n_res_blocks=cfg.scorenet.n_res_blocks,
                        sigma_data=cfg.scorenet.sigma_data)


def build_net(cfg: ExperimentConfig) -> ScoreNet:
    return ScoreNet(build_schedule(cfg), build_architecture(cfg), seed=cfg.seeds.train)


def build_train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.batch_size, t.steps, t.learning_rate, t.sigma_law, cfg.seeds.train, t.pool_size,
                       t.grad_clip, t.lr_decay_to)


def build_perturbation(cfg: ExperimentConfig, seed: int) -> tuple[MotionSpline, dict]:
    p = cfg.perturbation
    return random_perturbation(PerturbationSpec(p.nodes, p.amplitude_t_mm, p.amplitude_r_deg, seed),
                               cfg.geometry.n_views)


@dataclass
class Case:
    seed: int
    phantom: Image
    gt_motion: MotionSpline
    perturbation_meta: dict
    sinogram: Sinogram
    reference: Image
    init: Image
    operator: FBPOperator


def simulate_case(cfg: ExperimentConfig, seed: int) -> Case:
    geometry = build_geometry(cfg)
    phantom = sample_phantom(build_sampler(cfg), seed)
    gt, meta = build_perturbation(cfg, seed)
    shape = (cfg.image.size, cfg.image.size)
    clean = forward_project(phantom, geometry)
    reference = FBPOperator(clean, shape, cfg.image.spacing_mm).reconstruct()
    sino = forward_project(phantom, geometry, gt.per_view_radians())
    op = FBPOperator(sino, shape, cfg.image.spacing_mm)
    return Case(seed, phantom, gt, meta, sino, reference, op.reconstruct(), op)


def make_objective(cfg: ExperimentConfig, kind: str, reference: Image | None = None,
                   score: ScoreFunction | None = None, stream: int = 0) -> Objective:
    if kind == "mse-oracle":
        if reference is None:
            raise ValueError("the mse-oracle objective needs a reference image")
        return mse_objective(reference)
    if kind == "likelihood":
        if score is None:
            raise ValueError("the likelihood objective needs a score function")
        return likelihood_objective(score, build_schedule(cfg), build_ode(cfg), build_trace(cfg, stream))
    raise ValueError(f"unknown objective {kind!r}; expected one of {OBJECTIVES}")


@dataclass
class CaseResult:
    seed: int
    result: CompensationResult
    init_report: EvalReport
    final_report: EvalReport


def evaluate_images(cfg: ExperimentConfig, case: Case, image: Image, est_motion: MotionSpline) -> EvalReport:
    return evaluate_case(image, case.reference, case.gt_motion, est_motion, build_geometry(cfg),
                         data_range=cfg.image.data_range)


def run_case(cfg: ExperimentConfig, seed: int, objective: str = "mse-oracle",
             score: ScoreFunction | None = None) -> CaseResult:
    case = simulate_case(cfg, seed)
    obj = make_objective(cfg, objective, case.reference, score, stream=seed)
    shape = (cfg.image.size, cfg.image.size)
    res = compensate(case.sinogram, obj, build_optimizer(cfg, seed), shape, cfg.image.spacing_mm,
                     operator=case.operator)
    zero = MotionSpline.zeros(cfg.spline.nodes, cfg.geometry.n_views)
    return CaseResult(seed, res, evaluate_images(cfg, case, case.init, zero),
                      evaluate_images(cfg, case, res.image, res.spline))


def run_cases(cfg: ExperimentConfig, seeds, objective: str = "mse-oracle", score: ScoreFunction | None = None,
              jobs: int = 1) -> list[CaseResult]:
    """Independent cases, optionally on worker threads; results keep seed order."""
    seeds = list(seeds)
    if jobs <= 1:
        return [run_case(cfg, s, objective, score) for s in seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: run_case(cfg, s, objective, score), seeds))


def array_hash(a) -> str:
    arr = np.ascontiguousarray(np.asarray(getattr(a, "data", a), dtype=np.float64))
    return hashlib.sha256(arr.tobytes()).hexdigest()
