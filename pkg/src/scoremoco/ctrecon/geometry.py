"""Flat-detector fan-beam geometry and the rigid-motion convention.

View i sits at angle beta_i = 2*pi*i / n_views (counter-clockwise); the source
starts on the +x axis. A per-view rigid parameter triple (tx, ty, r) moves the
whole acquisition frame (source and detector) by q -> R(r) q + (tx, ty); the
patient therefore appears moved by the inverse transform.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class FanBeamGeometry:
    n_views: int = 360
    source_isocenter_mm: float = 785.0
    source_detector_mm: float = 1200.0
    detector_bins: int = 700
    bin_spacing_mm: float = 0.64

    def __post_init__(self):
        if self.n_views < 1 or self.detector_bins < 2:
            raise ValueError("need at least one view and two detector bins")
        if not (self.source_detector_mm > self.source_isocenter_mm > 0):
            raise ValueError("need source_detector > source_isocenter > 0")
        if self.bin_spacing_mm <= 0:
            raise ValueError("bin spacing must be positive")

    @property
    def magnification(self) -> float:
        return self.source_detector_mm / self.source_isocenter_mm

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_views) / self.n_views

    @property
    def bin_centers(self) -> np.ndarray:
        """Detector coordinates u (mm) of bin centres, symmetric about the central ray."""
        return (np.arange(self.detector_bins) - (self.detector_bins - 1) / 2.0) * self.bin_spacing_mm

    @property
    def virtual_spacing(self) -> float:
        """Bin spacing rescaled to a virtual detector through the isocenter."""
        return self.bin_spacing_mm / self.magnification

    @property
    def fov_radius(self) -> float:
        """Radius of the circle covered by every view (motion-free)."""
        half = self.bin_centers[-1] + 0.5 * self.bin_spacing_mm
        r, d = self.source_isocenter_mm, self.source_detector_mm
        return r * half / np.hypot(d, half)

    def to_dict(self) -> dict:
        return asdict(self)

    def frames(self):
        """Unit vectors per view: e (isocenter -> source) and u (detector axis)."""
        b = self.angles
        e = np.stack([np.cos(b), np.sin(b)], axis=1)
        u = np.stack([-np.sin(b), np.cos(b)], axis=1)
        return e, u


def as_motion(motion, n_views: int) -> np.ndarray | None:
    """Normalise per-view rigid params to an (n_views, 3) array in (mm, mm, rad).

    Returns None for "no motion" (None or all zeros) so callers can take the
    motion-free path.
    """
    if motion is None:
        return None
    m = np.asarray(motion, dtype=np.float64)
    if m.shape != (n_views, 3):
        raise ValueError(f"motion must have shape ({n_views}, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("motion contains non-finite values")
    return m if np.any(m) else None


def rotation(r):
    c, s = np.cos(r), np.sin(r)
    return np.array([[c, -s], [s, c]])


def to_view_frame(px, py, params):
    """Coordinates of world points in the unmoved frame of a view moved by params."""
    tx, ty, r = params
    c, s = np.cos(r), np.sin(r)
    qx, qy = px - tx, py - ty
    return c * qx + s * qy, -s * qx + c * qy


def source_and_detector(geometry: FanBeamGeometry, motion=None):
    """World positions of sources (V, 2) and detector bin centres (V, B, 2)."""
    e, u = geometry.frames()
    r, d = geometry.source_isocenter_mm, geometry.source_detector_mm
    src = r * e
    det = (-(d - r) * e)[:, None, :] + geometry.bin_centers[None, :, None] * u[:, None, :]
    m = as_motion(motion, geometry.n_views)
    if m is None:
        return src, det
    c, s = np.cos(m[:, 2]), np.sin(m[:, 2])
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (V, 2, 2)
    src = np.einsum("vij,vj->vi", rot, src) + m[:, :2]
    det = np.einsum("vij,vbj->vbi", rot, det) + m[:, None, :2]
    return src, det


def project_points(geometry: FanBeamGeometry, points: np.ndarray, motion=None) -> np.ndarray:
    """Detector coordinate u (mm) of each world point in each view, shape (V, P)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    e, u = geometry.frames()
    m = as_motion(motion, geometry.n_views)
    if m is None:
        m = np.zeros((geometry.n_views, 3))
    out = np.empty((geometry.n_views, pts.shape[0]))
    r, d = geometry.source_isocenter_mm, geometry.source_detector_mm
    for i in range(geometry.n_views):
        cx, cy = to_view_frame(pts[:, 0], pts[:, 1], m[i])
        along = r - (cx * e[i, 0] + cy * e[i, 1])
        out[i] = d * (cx * u[i, 0] + cy * u[i, 1]) / along
    return out
