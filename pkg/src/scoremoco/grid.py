"""Dense 2-D images, counter-based random streams and raw+JSON file I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

PAYLOAD_SUFFIX = ".f32raw"
HEADER_SUFFIX = ".json"
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major 2-D scalar image with isotropic pixel spacing in mm.

    Row 0 is the top of the image (largest y); column 0 is the left edge
    (smallest x). The pixel grid is centred on the isocenter.
    """

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Image":
        return Image(data, self.spacing)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates (x, y) in mm of every pixel centre, each of image shape."""
        h, w = self.shape
        xs = (np.arange(w) - (w - 1) / 2.0) * self.spacing
        ys = ((h - 1) / 2.0 - np.arange(h)) * self.spacing
        return np.meshgrid(xs, ys)


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeededRng:
    """Value-like handle on a counter-based (Philox) random stream.

    Every call to :meth:`generator` restarts the stream at counter zero, so a
    given ``(seed, stream)`` pair always yields the same draws regardless of
    call order or threading.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = getattr(self, name)
            if not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {v}")
            object.__setattr__(self, name, int(v))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def spawn(self, index: int) -> "SeededRng":
        """Child stream, deterministic in (seed, stream, index)."""
        mixed = _splitmix64(self.stream ^ _splitmix64(int(index) + 1))
        return SeededRng(self.seed, mixed)


def rademacher(rng: SeededRng, n: int | tuple[int, ...]) -> np.ndarray:
    """Draw ``n`` entries uniformly from {-1, +1} (float64)."""
    shape = (n,) if np.isscalar(n) else tuple(n)
    if len(shape) == 0 or min(shape) < 1:
        raise ValueError(f"rademacher needs a positive count, got {n}")
    bits = rng.generator().integers(0, 2, size=shape, dtype=np.int8)
    return bits.astype(np.float64) * 2.0 - 1.0


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (PAYLOAD_SUFFIX, HEADER_SUFFIX):
        p = p.with_suffix("")
    return p.with_name(p.name + PAYLOAD_SUFFIX), p.with_name(p.name + HEADER_SUFFIX)


def write_array(path: str | Path, array: np.ndarray, header: dict[str, Any] | None = None) -> Path:
    """Write a 2-D array as little-endian float32 payload plus JSON sidecar.

    Returns the payload path.
    """
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ValueError("only 2-D arrays are stored")
    raw_path, json_path = _paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(header or {})
    meta.update(height=int(arr.shape[0]), width=int(arr.shape[1]), dtype="float32", byte_order="little")
    raw_path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return raw_path


def read_array(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    raw_path, json_path = _paths(path)
    try:
        meta = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: invalid JSON header ({exc})") from exc
    if meta.get("dtype") != "float32" or meta.get("byte_order") != "little":
        raise FormatError(f"{json_path}: unsupported dtype/byte order")
    try:
        h, w = int(meta["height"]), int(meta["width"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{json_path}: missing or invalid dimensions") from exc
    payload = raw_path.read_bytes()
    if len(payload) != 4 * h * w:
        raise FormatError(
            f"{raw_path}: header says {h}x{w} ({4 * h * w} bytes) but payload has {len(payload)} bytes"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w)
    return arr, meta


def write_image(image: Image, path: str | Path) -> Path:
    return write_array(path, image.data, {"kind": "image", "spacing_mm": image.spacing})


def read_image(path: str | Path) -> Image:
    arr, meta = read_array(path)
    if "spacing_mm" not in meta:
        raise FormatError(f"{path}: header lacks spacing_mm")
    return Image(arr, meta["spacing_mm"])


def export_png(data: np.ndarray, path: str | Path, window: tuple[float, float] = (0.0, 1.0)) -> None:
    """Windowed 8-bit grayscale export, for inspection only."""
    from PIL import Image as PILImage

    lo, hi = window
    scaled = np.clip((np.asarray(data, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
