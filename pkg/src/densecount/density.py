"""Gaussian density-map ground truth.

Each annotated object becomes a truncated 2-D Gaussian splat centred on its
(sub-pixel) location, evaluated at integer pixel centres. With
renormalisation on (the default), every splat is divided by its in-window,
in-image mass, so each object contributes exactly one unit and the map sums
to the object count regardless of truncation and border clipping.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import AnnotationSet
from .errors import AnnotationError, ConfigError, ShapeError


@dataclass(frozen=True)
class GaussianSpec:
    """Kernel width in pixels, truncation window in multiples of sigma."""

    sigma: float = 15.0
    truncation_radius: float = 4.0
    renormalize: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.truncation_radius < 1:
            raise ConfigError("truncation_radius must be >= 1")

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "truncation_radius": self.truncation_radius,
                "renormalize": self.renormalize}


@dataclass
class DensityMap:
    """A non-negative 2-D field whose integral is the object count."""

    values: np.ndarray
    source_count: int

    @property
    def total(self) -> float:
        return float(self.values.sum())


def annotations_to_points(ann: AnnotationSet) -> list[tuple[float, float]]:
    """Point annotations pass through; boxes reduce to their centres."""
    if ann.kind == "points":
        return [(float(x), float(y)) for x, y in ann.entries]
    points = []
    for i, (xmin, ymin, xmax, ymax) in enumerate(ann.entries):
        if xmax < xmin or ymax < ymin:
            raise AnnotationError(f"box ({xmin}, {ymin}, {xmax}, {ymax}) has negative extent",
                                  index=i)
        points.append(((xmin + xmax) / 2.0, (ymin + ymax) / 2.0))
    return points


def generate_density(points, height: int, width: int,
                     spec: GaussianSpec | None = None) -> DensityMap:
    """Splat one truncated Gaussian per point onto a (height, width) grid.

    Points are (x, y) with x in [0, width) and y in [0, height); pixel (r, c)
    is centred at coordinate (c, r). The window half-extent is
    ceil(truncation_radius * sigma) pixels per axis. Without renormalisation
    the splat carries the analytic 1/(2*pi*sigma^2) factor instead, so an
    interior splat still sums to ~1 but border clipping loses mass.
    """
    spec = spec or GaussianSpec()
    if height < 1 or width < 1:
        raise ShapeError(f"invalid density extents {height}x{width}")
    dens = np.zeros((height, width))
    radius = math.ceil(spec.truncation_radius * spec.sigma)
    inv_two_sigma_sq = 1.0 / (2.0 * spec.sigma * spec.sigma)
    for i, (px, py) in enumerate(points):
        if not (0 <= px < width and 0 <= py < height):
            raise AnnotationError(f"point ({px}, {py}) outside {width}x{height} image", index=i)
        x_lo = max(0, math.ceil(px - radius))
        x_hi = min(width - 1, math.floor(px + radius))
        y_lo = max(0, math.ceil(py - radius))
        y_hi = min(height - 1, math.floor(py + radius))
        xs = np.arange(x_lo, x_hi + 1) - px
        ys = np.arange(y_lo, y_hi + 1) - py
        splat = np.exp(-(xs[None, :] ** 2 + ys[:, None] ** 2) * inv_two_sigma_sq)
        if spec.renormalize:
            splat /= splat.sum()
        else:
            splat *= inv_two_sigma_sq / math.pi
        dens[y_lo:y_hi + 1, x_lo:x_hi + 1] += splat
    return DensityMap(dens, source_count=len(points))


def downsample_density(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum factor x factor blocks; the total mass is preserved."""
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    if factor == 1:
        return DensityMap(dmap.values.copy(), dmap.source_count)
    h, w = dmap.values.shape
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} not divisible by factor {factor}")
    blocks = dmap.values.reshape(h // factor, factor, w // factor, factor)
    return DensityMap(blocks.sum(axis=(1, 3)), dmap.source_count)


# ---------------------------------------------------------------------------
# 16-bit grayscale export with a max-value sidecar, for visual inspection


def save_density_png(values: np.ndarray, path) -> None:
    """Write a 16-bit PNG scaled to the map's maximum, recorded in a sidecar.

    The sidecar ``<path>.json`` stores the max value and extents so the
    quantised map round-trips deterministically via load_density_png.
    """
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    max_value = float(values.max()) if values.size else 0.0
    if max_value > 0:
        quantised = np.round(values / max_value * 65535.0).astype(np.uint16)
    else:
        quantised = np.zeros(values.shape, dtype=np.uint16)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantised).save(path)
    sidecar = {"max_value": max_value,
               "height": int(values.shape[0]), "width": int(values.shape[1])}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_density_png(path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.asarray(Image.open(path), dtype=np.float64)
    if sidecar["max_value"] == 0:
        return np.zeros_like(raw)
    return raw / 65535.0 * sidecar["max_value"]
