"""Catmull-Rom spline parameterisation of per-view rigid motion.

A :class:`MotionSpline` stores node values for tx (mm), ty (mm) and r
(degrees) at uniformly spaced node times over the view range. End nodes are
replicated, so each view depends on at most four nodes per parameter. Since
the curve is linear in the node values, the map from nodes to per-view
parameters is a fixed sparse matrix, :func:`interpolation_matrix`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError
from .grid import SeededRng

FAMILY = "catmull-rom-clamped"
CONVENTION = "geometry"  # params move source/detector: q -> R(r) q + t
PARAMS = ("tx_mm", "ty_mm", "r_deg")


@lru_cache(maxsize=32)
def interpolation_matrix(n_nodes: int, n_views: int) -> np.ndarray:
    """Weights W (n_views, n_nodes) with per-view value = W @ node_values."""
    if n_nodes < 1 or n_views < 1:
        raise ValueError("need at least one node and one view")
    w = np.zeros((n_views, n_nodes))
    if n_nodes == 1 or n_views == 1:
        w[:, 0] = 1.0
        w.setflags(write=False)
        return w
    pos = np.arange(n_views) * (n_nodes - 1) / (n_views - 1)
    seg = np.minimum(np.floor(pos).astype(int), n_nodes - 2)
    u = pos - seg
    u2, u3 = u * u, u * u * u
    coeffs = 0.5 * np.stack([
        -u3 + 2 * u2 - u,
        3 * u3 - 5 * u2 + 2,
        -3 * u3 + 4 * u2 + u,
        u3 - u2,
    ], axis=1)
    rows = np.arange(n_views)
    for j, off in enumerate((-1, 0, 1, 2)):
        idx = np.clip(seg + off, 0, n_nodes - 1)
        np.add.at(w, (rows, idx), coeffs[:, j])
    w.setflags(write=False)
    return w


@dataclass(frozen=True, eq=False)
class MotionSpline:
    """Node values of shape (3, n_nodes): rows tx [mm], ty [mm], r [deg]."""

    nodes: np.ndarray
    n_views: int = 360

    def __post_init__(self):
        arr = np.array(self.nodes, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] != 3 or arr.shape[1] < 1:
            raise ValueError(f"nodes must have shape (3, n_nodes), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("spline nodes must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "nodes", arr)

    @classmethod
    def zeros(cls, n_nodes: int = 30, n_views: int = 360) -> "MotionSpline":
        return cls(np.zeros((3, n_nodes)), n_views)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[1]

    @property
    def node_times(self) -> np.ndarray:
        """Node positions in view-index units."""
        return np.linspace(0.0, self.n_views - 1, self.n_nodes)

    def weights(self) -> np.ndarray:
        return interpolation_matrix(self.n_nodes, self.n_views)

    def per_view(self) -> np.ndarray:
        """(n_views, 3) array of (tx mm, ty mm, r deg)."""
        return (self.weights() @ self.nodes.T)

    def per_view_radians(self) -> np.ndarray:
        """(n_views, 3) array of (tx mm, ty mm, r rad), the projector convention."""
        m = self.per_view()
        m[:, 2] = np.deg2rad(m[:, 2])
        return m

    def evaluate(self, view_index: int) -> tuple[float, float, float]:
        if not 0 <= view_index < self.n_views:
            raise ValueError(f"view index {view_index} outside [0, {self.n_views})")
        tx, ty, r = self.weights()[view_index] @ self.nodes.T
        return float(tx), float(ty), float(r)

    def pack(self) -> np.ndarray:
        return pack(self)

    def to_dict(self) -> dict:
        return {
            "family": FAMILY,
            "convention": CONVENTION,
            "units": {"tx": "mm", "ty": "mm", "r": "deg"},
            "n_views": self.n_views,
            "node_times": self.node_times.tolist(),
            "values": {name: self.nodes[i].tolist() for i, name in enumerate(PARAMS)},
        }


def pack(spline: MotionSpline) -> np.ndarray:
    """Flatten to gamma = [tx nodes, ty nodes, r nodes]."""
    return spline.nodes.ravel().copy()


def unpack(gamma, n_nodes: int, n_views: int = 360) -> MotionSpline:
    g = np.asarray(gamma, dtype=np.float64).ravel()
    if g.size != 3 * n_nodes:
        raise ValueError(f"gamma must have length {3 * n_nodes}, got {g.size}")
    return MotionSpline(g.reshape(3, n_nodes), n_views)


def gamma_gradient(spline_nodes: int, n_views: int, per_view_grad: np.ndarray) -> np.ndarray:
    """Chain per-view gradients (mm, mm, rad) into gradients w.r.t. gamma (mm, mm, deg)."""
    g = np.asarray(per_view_grad, dtype=np.float64)
    if g.shape != (n_views, 3):
        raise ValueError("per-view gradient must have shape (n_views, 3)")
    w = interpolation_matrix(spline_nodes, n_views)
    out = w.T @ g  # (n_nodes, 3)
    out[:, 2] *= np.pi / 180.0
    return out.T.ravel()


@dataclass(frozen=True)
class PerturbationSpec:
    nodes: int = 10
    amplitude_t: float = 5.0
    amplitude_r: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude_t < 0 or self.amplitude_r < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.nodes < 1:
            raise ValueError("need at least one node")


def random_perturbation(spec: PerturbationSpec, n_views: int = 360) -> tuple[MotionSpline, dict]:
    """Uniform node values in [-amplitude, amplitude]; returns the spline and metadata."""
    gen = SeededRng(spec.seed, 0x9E27).generator()
    amp = np.array([spec.amplitude_t, spec.amplitude_t, spec.amplitude_r])
    nodes = gen.uniform(-1.0, 1.0, size=(3, spec.nodes)) * amp[:, None] + 0.0  # no negative zeros
    spline = MotionSpline(nodes, n_views)
    pv = np.abs(spline.per_view()).max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        overshoot = np.where(amp > 0, pv / amp, 0.0)
    meta = {
        "seed": spec.seed,
        "nodes": spec.nodes,
        "amplitude_t_mm": spec.amplitude_t,
        "amplitude_r_deg": spec.amplitude_r,
        "max_abs_per_view": dict(zip(PARAMS, pv.tolist())),
        "overshoot_factor": dict(zip(PARAMS, overshoot.tolist())),
    }
    return spline, meta


def resample(spline: MotionSpline, n_nodes: int) -> MotionSpline:
    """Least-squares fit of an n_nodes spline to the per-view curve of ``spline``."""
    w = interpolation_matrix(n_nodes, spline.n_views)
    target = spline.per_view()
    nodes, *_ = np.linalg.lstsq(w, target, rcond=None)
    return MotionSpline(nodes.T, spline.n_views)


def save_motion(spline: MotionSpline, path, meta: dict | None = None) -> None:
    d = spline.to_dict()
    if meta:
        d["meta"] = meta
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


def load_motion(path) -> MotionSpline:
    d = json.loads(Path(path).read_text())
    if d.get("family") != FAMILY or d.get("convention") != CONVENTION:
        raise FormatError(f"{path}: unsupported spline family or convention")
    nodes = np.array([d["values"][name] for name in PARAMS], dtype=np.float64)
    return MotionSpline(nodes, int(d["n_views"]))
