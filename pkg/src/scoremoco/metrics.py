"""Image, geometry and motion-parameter error metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .ctrecon.geometry import FanBeamGeometry, project_points

FIDUCIALS_MM = np.array([[50.0, 0.0], [-50.0, 0.0], [0.0, 50.0], [0.0, -50.0]])


def _arrays(a, b):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _arrays(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ssim(a, b, data_range: float = 1.0, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and a fixed data range."""
    a, b = _arrays(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    # truncate so that the kernel spans exactly 11 taps
    blur = lambda z: gaussian_filter(z, sigma, mode="reflect", truncate=5.0 / sigma)  # noqa: E731
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    pad = 5
    smap = num / den
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def _motion_rad(motion) -> np.ndarray:
    """Accept a MotionSpline or an (n_views, 3) array in (mm, mm, deg)."""
    if hasattr(motion, "per_view_radians"):
        return motion.per_view_radians()
    m = np.array(motion, dtype=np.float64)
    m[:, 2] = np.deg2rad(m[:, 2])
    return m


def _motion_deg(motion) -> np.ndarray:
    if hasattr(motion, "per_view"):
        return motion.per_view()
    return np.asarray(motion, dtype=np.float64)


def invert_convention(motion_deg: np.ndarray) -> np.ndarray:
    """Per-view parameters of the inverse rigid transform (mm, mm, deg)."""
    m = np.asarray(motion_deg, dtype=np.float64)
    r = np.deg2rad(m[:, 2])
    c, s = np.cos(r), np.sin(r)
    tx = -(c * m[:, 0] + s * m[:, 1])
    ty = -(-s * m[:, 0] + c * m[:, 1])
    return np.stack([tx, ty, -m[:, 2]], axis=1)


def reprojection_error(gt_motion, est_motion, geometry: FanBeamGeometry, convention: str = "geometry",
                       fiducials: np.ndarray = FIDUCIALS_MM) -> float:
    """Mean absolute detector-coordinate difference (mm) of projected fiducials.

    ``convention`` names how the motions are expressed: "geometry" (params
    move the acquisition frame) or "patient" (params move the object).
    """
    gt, est = _motion_deg(gt_motion), _motion_deg(est_motion)
    if gt.shape != est.shape or gt.shape[0] != geometry.n_views:
        raise ValueError("motions must be defined on the geometry's view grid")
    if convention == "patient":
        gt, est = invert_convention(gt), invert_convention(est)
    elif convention != "geometry":
        raise ValueError(f"unknown convention {convention!r}")
    gt_r, est_r = _motion_rad(gt), _motion_rad(est)
    u_gt = project_points(geometry, fiducials, gt_r)
    u_est = project_points(geometry, fiducials, est_r)
    return float(np.mean(np.abs(u_gt - u_est)))


def motion_mae(gt_motion, est_motion) -> tuple[float, float, float]:
    """Per-parameter mean absolute error over views: (tx mm, ty mm, r deg)."""
    gt, est = _motion_deg(gt_motion), _motion_deg(est_motion)
    if gt.shape != est.shape:
        raise ValueError("motions must be defined on the same view grid")
    mae = np.mean(np.abs(gt - est), axis=0)
    return float(mae[0]), float(mae[1]), float(mae[2])


@dataclass
class EvalReport:
    rmse: float
    ssim: float
    rpe_mm: float
    mae_tx_mm: float
    mae_ty_mm: float
    mae_r_deg: float

    def __post_init__(self):
        vals = asdict(self)
        if not all(np.isfinite(v) for v in vals.values()):
            raise ValueError("EvalReport values must be finite")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim must lie in [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


FIELDS = ("rmse", "ssim", "rpe_mm", "mae_tx_mm", "mae_ty_mm", "mae_r_deg")


def evaluate_case(image, reference, gt_motion, est_motion, geometry, data_range: float = 1.0) -> EvalReport:
    mae = motion_mae(gt_motion, est_motion)
    return EvalReport(
        rmse=rmse(image, reference),
        ssim=ssim(image, reference, data_range=data_range),
        rpe_mm=reprojection_error(gt_motion, est_motion, geometry),
        mae_tx_mm=mae[0],
        mae_ty_mm=mae[1],
        mae_r_deg=mae[2],
    )


def aggregate(reports: list[EvalReport]) -> dict:
    """Mean and box-plot quantiles (min, q1, median, q3, max) per metric."""
    out = {}
    for f in FIELDS:
        v = np.array([getattr(r, f) for r in reports], dtype=np.float64)
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        out[f] = {"mean": float(v.mean()), "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4]}
        out[f] = {k: float(val) for k, val in out[f].items()}
    return out


def write_report_csv(rows: dict[str, list[EvalReport]], path) -> None:
    """One row per method (e.g. init, compensated) with mean metric values."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", *FIELDS])
        for name, reports in rows.items():
            agg = aggregate(reports)
            w.writerow([name, len(reports), *[f"{agg[f]['mean']:.6g}" for f in FIELDS]])


def write_quantiles_json(rows: dict[str, list[EvalReport]], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({k: aggregate(v) for k, v in rows.items()}, indent=2, sort_keys=True))
