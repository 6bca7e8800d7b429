"""Analytic ellipse phantoms: Shepp-Logan and random head-like slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..grid import Image, SeededRng

# Modified (Toft) Shepp-Logan: intensity, semi-axes a, b, centre x0, y0, angle (deg).
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
]


def rasterize_ellipses(ellipses, shape, supersample: int = 3) -> np.ndarray:
    """Sum of uniform ellipses in normalised coordinates [-1, 1]^2 (y up).

    Each pixel is the mean over a ``supersample`` x ``supersample`` sub-grid.
    """
    h, w = shape
    ss = supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    xs = ((np.arange(w)[:, None] + 0.5 + sub[None, :]).ravel() / w) * 2.0 - 1.0
    ys = 1.0 - ((np.arange(h)[:, None] + 0.5 + sub[None, :]).ravel() / h) * 2.0
    x, y = np.meshgrid(xs, ys)
    img = np.zeros_like(x)
    for val, a, b, x0, y0, ang in ellipses:
        th = np.deg2rad(ang)
        dx, dy = x - x0, y - y0
        xr = dx * np.cos(th) + dy * np.sin(th)
        yr = -dx * np.sin(th) + dy * np.cos(th)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return img.reshape(h, ss, w, ss).mean(axis=(1, 3))


def shepp_logan(size: int = 256, spacing: float = 1.0) -> Image:
    return Image(np.clip(rasterize_ellipses(_SHEPP_LOGAN, (size, size)), 0.0, 1.0), spacing)


@dataclass(frozen=True)
class PhantomSampler:
    """Random head-like slices: skull ring, brain tissue and inner ellipses in [0, 1]."""

    size: int = 64
    spacing: float = 4.0
    ellipse_count: tuple[int, int] = (3, 8)
    intensity_range: tuple[float, float] = (0.05, 0.6)
    skull: bool = True
    extent: float = 0.8

    def ellipses(self, seed: int):
        gen = SeededRng(seed, 0xFA47).generator()
        a = self.extent * gen.uniform(0.8, 0.95)
        b = self.extent * gen.uniform(0.9, 1.0)
        ang = gen.uniform(-10.0, 10.0)
        tissue = gen.uniform(0.25, 0.35)
        out = []
        if self.skull:
            out.append((1.0, a, b, 0.0, 0.0, ang))
            thick = gen.uniform(0.06, 0.1)
            out.append((tissue - 1.0, a - thick, b - thick, 0.0, 0.0, ang))
            a, b = a - thick, b - thick
        else:
            out.append((tissue, a, b, 0.0, 0.0, ang))
        lo, hi = self.ellipse_count
        n = int(gen.integers(lo, hi + 1)) if hi > 0 else 0
        for _ in range(n):
            rr = gen.uniform(0.0, 0.7)
            phi = gen.uniform(0.0, 2 * np.pi)
            ea = gen.uniform(0.05, 0.3) * a
            eb = gen.uniform(0.05, 0.3) * b
            val = gen.uniform(*self.intensity_range) - tissue
            out.append((val, ea, eb, rr * a * np.cos(phi), rr * b * np.sin(phi), gen.uniform(0.0, 180.0)))
        return out

    def sample_array(self, seed: int) -> np.ndarray:
        img = rasterize_ellipses(self.ellipses(seed), (self.size, self.size))
        return np.clip(img, 0.0, 1.0)

    def __call__(self, seed: int) -> np.ndarray:
        return self.sample_array(seed)


def sample_phantom(sampler: PhantomSampler, seed: int) -> Image:
    return Image(sampler.sample_array(seed), sampler.spacing)
