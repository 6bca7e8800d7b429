"""Validated experiment configuration (JSON)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeometryBlock(_Block):
    n_views: int = Field(360, ge=1)
    source_isocenter_mm: float = Field(785.0, gt=0)
    source_detector_mm: float = Field(1200.0, gt=0)
    detector_bins: int = Field(700, ge=2)
    bin_spacing_mm: float = Field(0.64, gt=0)

    @model_validator(mode="after")
    def _distances(self):
        if self.source_detector_mm <= self.source_isocenter_mm:
            raise ValueError("source_detector_mm must exceed source_isocenter_mm")
        return self


class ImageBlock(_Block):
    size: int = Field(64, ge=4)
    spacing_mm: float = Field(4.0, gt=0)
    data_range: float = Field(1.0, gt=0)


class PhantomBlock(_Block):
    ellipse_count: tuple[int, int] = (3, 8)
    intensity_range: tuple[float, float] = (0.05, 0.6)
    skull: bool = True


class ScheduleBlock(_Block):
    sigma_min: float = Field(0.01, gt=0)
    sigma_max: float = Field(50.0, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if self.sigma_max <= self.sigma_min:
            raise ValueError("sigma_max must exceed sigma_min")
        return self


class OdeBlock(_Block):
    forward_steps: int = Field(10, ge=1)
    adjoint_steps: int = Field(20, ge=1)
    method: Literal["rk4"] = "rk4"


class TraceBlock(_Block):
    mode: Literal["hutchinson", "exact"] = "hutchinson"
    n_probes: int = Field(1, ge=1)
    exact_cap: int = Field(4096, ge=1)


class OptimizerBlock(_Block):
    iterations: int = Field(40, ge=1)
    r0: float = Field(100.0, gt=0)
    q: float = Field(0.97, gt=0, le=1)
    calibrate_step: Optional[float] = Field(None, gt=0)


class PerturbationBlock(_Block):
    nodes: int = Field(10, ge=1)
    amplitude_t_mm: float = Field(5.0, ge=0)
    amplitude_r_deg: float = Field(5.0, ge=0)


class SplineBlock(_Block):
    nodes: int = Field(30, ge=1)


class ScoreNetBlock(_Block):
    channels: int = Field(32, ge=1)
    n_res_blocks: int = Field(4, ge=0)
    sigma_data: float = Field(0.5, gt=0)


class TrainBlock(_Block):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(2e-3, gt=0)
    sigma_law: Literal["log-uniform"] = "log-uniform"
    pool_size: int = Field(256, ge=1)
    grad_clip: float = Field(10.0, ge=0)
    lr_decay_to: float = Field(0.1, gt=0, le=1)
    # "reconstruction": motion-free FBP images of the phantoms, i.e. what the objective will see
    data: Literal["phantom", "reconstruction"] = "phantom"


class PathsBlock(_Block):
    out_dir: str = "runs"
    weights: Optional[str] = None


class SeedsBlock(_Block):
    base: int = Field(0, ge=0)
    n_cases: int = Field(1, ge=1)
    train: int = Field(0, ge=0)
    trace: int = Field(0, ge=0)

    def case_seeds(self) -> list[int]:
        return [self.base + i for i in range(self.n_cases)]


class ExperimentConfig(_Block):
    geometry: GeometryBlock = GeometryBlock()
    image: ImageBlock = ImageBlock()
    phantom: PhantomBlock = PhantomBlock()
    schedule: ScheduleBlock = ScheduleBlock()
    ode: OdeBlock = OdeBlock()
    trace: TraceBlock = TraceBlock()
    optimizer: OptimizerBlock = OptimizerBlock()
    perturbation: PerturbationBlock = PerturbationBlock()
    spline: SplineBlock = SplineBlock()
    scorenet: ScoreNetBlock = ScoreNetBlock()
    train: TrainBlock = TrainBlock()
    paths: PathsBlock = PathsBlock()
    seeds: SeedsBlock = SeedsBlock()

    @field_validator("*", mode="before")
    @classmethod
    def _none_is_default(cls, v):
        return {} if v is None else v

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def updated(self, **blocks) -> "ExperimentConfig":
        """Copy with selected fields of selected blocks replaced, e.g. ``optimizer={"r0": 5}``."""
        d = self.to_dict()
        for name, values in blocks.items():
            if name not in d:
                raise ConfigError(f"unknown config block {name!r}")
            d[name].update(values)
        return from_dict(d)


def from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
