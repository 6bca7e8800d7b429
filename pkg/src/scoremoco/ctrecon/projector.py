"""Ray-driven forward projector and its exact adjoint."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from ..errors import FormatError
from ..grid import Image, read_array, write_array
from .geometry import FanBeamGeometry, as_motion, source_and_detector


@dataclass(frozen=True, eq=False)
class Sinogram:
    data: np.ndarray
    geometry: FanBeamGeometry

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        expected = (self.geometry.n_views, self.geometry.detector_bins)
        if arr.shape != expected:
            raise ValueError(f"sinogram shape {arr.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("sinogram contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


def write_sinogram(sino: Sinogram, path) -> Path:
    header = {"kind": "sinogram", "geometry": sino.geometry.to_dict()}
    return write_array(path, sino.data, header)


def read_sinogram(path) -> Sinogram:
    arr, meta = read_array(path)
    if meta.get("kind") != "sinogram" or "geometry" not in meta:
        raise FormatError(f"{path}: not a sinogram file")
    return Sinogram(arr, FanBeamGeometry(**meta["geometry"]))


def _ray_samples(image: Image, src, det):
    """Sample positions (pixel index coordinates) along every ray of one view.

    Rays are sampled at equal steps of half a pixel, symmetrically about the
    point closest to the isocenter, over the image's circumscribed circle.
    Returns (rows, cols, step) with rows/cols of shape (B, S).
    """
    h, w = image.shape
    sp = image.spacing
    step = 0.5 * sp
    rho = 0.5 * sp * np.hypot(h + 2, w + 2)
    n = int(np.ceil(2 * rho / step)) + 1
    d = det - src[None, :]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    closest = src[None, :] - (d @ src)[:, None] * d
    offs = (np.arange(n) - (n - 1) / 2.0) * step
    px = closest[:, 0:1] + offs[None, :] * d[:, 0:1]
    py = closest[:, 1:2] + offs[None, :] * d[:, 1:2]
    cols = px / sp + (w - 1) / 2.0
    rows = (h - 1) / 2.0 - py / sp
    return rows, cols, step


def _check_fov(image: Image, geometry: FanBeamGeometry):
    half_diag = 0.5 * image.spacing * np.hypot(*image.shape)
    if half_diag >= geometry.source_isocenter_mm:
        raise ValueError("image extent reaches the source orbit")


def forward_project(image: Image, geometry: FanBeamGeometry, motion=None) -> Sinogram:
    """Line integrals through the image by bilinear ray sampling (zero outside)."""
    _check_fov(image, geometry)
    src, det = source_and_detector(geometry, as_motion(motion, geometry.n_views))
    out = np.empty((geometry.n_views, geometry.detector_bins))
    for i in range(geometry.n_views):
        rows, cols, step = _ray_samples(image, src[i], det[i])
        vals = map_coordinates(image.data, [rows.ravel(), cols.ravel()], order=1, mode="grid-constant", cval=0.0)
        out[i] = step * vals.reshape(rows.shape).sum(axis=1)
    return Sinogram(out, geometry)


def backproject_adjoint(sinogram_like, geometry: FanBeamGeometry, image_shape, spacing: float,
                        motion=None) -> Image:
    """Exact transpose of :func:`forward_project` for the given image grid."""
    y = np.asarray(getattr(sinogram_like, "data", sinogram_like), dtype=np.float64)
    if y.shape != (geometry.n_views, geometry.detector_bins):
        raise ValueError("sinogram shape does not match geometry")
    h, w = image_shape
    grid = Image(np.zeros((h, w)), spacing)
    _check_fov(grid, geometry)
    src, det = source_and_detector(geometry, as_motion(motion, geometry.n_views))
    acc = np.zeros((h + 2) * (w + 2))
    for i in range(geometry.n_views):
        if not np.any(y[i]):
            continue
        rows, cols, step = _ray_samples(grid, src[i], det[i])
        r0 = np.floor(rows)
        c0 = np.floor(cols)
        fr = rows - r0
        fc = cols - c0
        inside = (r0 >= -1) & (r0 <= h - 1) & (c0 >= -1) & (c0 <= w - 1)
        r0 = np.where(inside, r0, -1).astype(np.int64) + 1
        c0 = np.where(inside, c0, -1).astype(np.int64) + 1
        wt = np.where(inside, step * y[i][:, None], 0.0)
        base = r0 * (w + 2) + c0
        for dr, dc, f in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
            acc += np.bincount((base + dr * (w + 2) + dc).ravel(), weights=(wt * f).ravel(), minlength=acc.size)
    return Image(acc.reshape(h + 2, w + 2)[1:-1, 1:-1], spacing)
