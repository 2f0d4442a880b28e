"""Image/annotation ingestion, augmentation and synthetic scene generation.

Annotation JSON (one file per image, and the same record shape inside a
dataset manifest):

    {"image": "<relative path>", "points": [[x, y], ...]}
    {"image": "<relative path>", "boxes": [[xmin, ymin, xmax, ymax], ...]}

Exactly one of "points"/"boxes" per record; manifest records additionally
carry "split": "train" | "test". Point coordinates live in [0, W) x [0, H)
with pixel (r, c) centred at coordinate (c, r); box corners must stay within
[0, W-1] x [0, H-1] so horizontal flips map them back into range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigError, ShapeError


@dataclass
class AnnotationSet:
    kind: str  # "points" | "boxes"
    entries: list

    def __post_init__(self):
        if self.kind not in ("points", "boxes"):
            raise AnnotationError(f"unknown annotation kind {self.kind!r}")
        self.entries = [tuple(float(v) for v in e) for e in self.entries]
        width = 2 if self.kind == "points" else 4
        for i, e in enumerate(self.entries):
            if len(e) != width:
                raise AnnotationError(f"expected {width} values, got {len(e)}", index=i)

    @property
    def count(self) -> int:
        return len(self.entries)


@dataclass
class AnnotatedImage:
    pixels: np.ndarray  # (3, H, W) float64 in [0, 1]
    annotations: AnnotationSet
    id: str

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"pixels must be (3, H, W), got {self.pixels.shape}")
        validate_annotations(self.annotations, self.width, self.height)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def count(self) -> int:
        return self.annotations.count


def validate_annotations(ann: AnnotationSet, width: int, height: int) -> None:
    if ann.kind == "points":
        for i, (x, y) in enumerate(ann.entries):
            if not (0 <= x < width and 0 <= y < height):
                raise AnnotationError(f"point ({x}, {y}) outside [0, {width}) x [0, {height})",
                                      index=i)
    else:
        for i, (xmin, ymin, xmax, ymax) in enumerate(ann.entries):
            if xmax < xmin or ymax < ymin:
                raise AnnotationError(f"box ({xmin}, {ymin}, {xmax}, {ymax}) has negative extent",
                                      index=i)
            if not (0 <= xmin and xmax <= width - 1 and 0 <= ymin and ymax <= height - 1):
                raise AnnotationError(
                    f"box ({xmin}, {ymin}, {xmax}, {ymax}) outside image {width}x{height}",
                    index=i)


def parse_annotation_record(record: dict) -> AnnotationSet:
    has_points, has_boxes = "points" in record, "boxes" in record
    if has_points == has_boxes:
        raise AnnotationError('record needs exactly one of "points" or "boxes"')
    if has_points:
        return AnnotationSet("points", record["points"])
    return AnnotationSet("boxes", record["boxes"])


def load_image(image_path) -> np.ndarray:
    """Decode an 8-bit PNG/JPEG into (3, H, W) floats in [0, 1]."""
    try:
        with Image.open(image_path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AnnotationError(f"cannot decode image {image_path}: {exc}") from exc
    return rgb.transpose(2, 0, 1) / 255.0


def load_annotations(image_path, ann_path) -> AnnotatedImage:
    """Load one image plus its annotation JSON, validating bounds."""
    try:
        record = json.loads(Path(ann_path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed annotation JSON {ann_path}: {exc}") from exc
    pixels = load_image(image_path)
    return AnnotatedImage(pixels, parse_annotation_record(record), id=Path(image_path).stem)


def load_manifest(manifest_path, split: str | None = None) -> list[AnnotatedImage]:
    """Load every record of a dataset manifest, optionally one split only."""
    manifest_path = Path(manifest_path)
    records = json.loads(manifest_path.read_text())
    if not isinstance(records, list):
        raise AnnotationError(f"manifest {manifest_path} must be a JSON array")
    images = []
    for record in records:
        if split is not None and record.get("split") != split:
            continue
        image_path = manifest_path.parent / record["image"]
        pixels = load_image(image_path)
        images.append(AnnotatedImage(pixels, parse_annotation_record(record),
                                     id=Path(record["image"]).stem))
    return images


# ---------------------------------------------------------------------------
# geometric transforms


def resize_with_annotations(img: AnnotatedImage, target_w: int, target_h: int) -> AnnotatedImage:
    """Bilinear resample; coordinates scale by (target_w / W, target_h / H)."""
    if target_w < 1 or target_h < 1:
        raise ShapeError(f"invalid resize target {target_w}x{target_h}")
    if target_w == img.width and target_h == img.height:
        return AnnotatedImage(img.pixels.copy(),
                              AnnotationSet(img.annotations.kind, list(img.annotations.entries)),
                              img.id)
    pixels = _resize_bilinear(img.pixels, target_w, target_h)
    sx, sy = target_w / img.width, target_h / img.height
    if img.annotations.kind == "points":
        entries = [(x * sx, y * sy) for x, y in img.annotations.entries]
    else:
        # corners scale like points but must stay on the last pixel centre
        entries = [(min(xmin * sx, target_w - 1), min(ymin * sy, target_h - 1),
                    min(xmax * sx, target_w - 1), min(ymax * sy, target_h - 1))
                   for xmin, ymin, xmax, ymax in img.annotations.entries]
    return AnnotatedImage(pixels, AnnotationSet(img.annotations.kind, entries), img.id)


def _resize_bilinear(pixels: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Separable bilinear resampling with half-pixel alignment, edges clamped."""
    _, h, w = pixels.shape

    def axis_coords(n_dst, n_src):
        coords = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        coords = np.clip(coords, 0.0, n_src - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = coords - lo
        return lo, hi, frac

    x_lo, x_hi, fx = axis_coords(target_w, w)
    y_lo, y_hi, fy = axis_coords(target_h, h)
    rows = pixels[:, :, x_lo] * (1 - fx) + pixels[:, :, x_hi] * fx
    return rows[:, y_lo] * (1 - fy)[None, :, None] + rows[:, y_hi] * fy[None, :, None]


def hflip(img: AnnotatedImage) -> AnnotatedImage:
    """Mirror pixels and annotations about the vertical axis.

    The coordinate map is x -> (W - 1) - x (pixel-centre convention), an
    exact involution for x <= W - 1. Points inside the open strip
    (W - 1, W) would land below zero, so they are dropped.
    """
    pixels = img.pixels[:, :, ::-1].copy()
    w = img.width
    if img.annotations.kind == "points":
        entries = [((w - 1) - x, y) for x, y in img.annotations.entries if (w - 1) - x >= 0]
    else:
        entries = [((w - 1) - xmax, ymin, (w - 1) - xmin, ymax)
                   for xmin, ymin, xmax, ymax in img.annotations.entries]
    return AnnotatedImage(pixels, AnnotationSet(img.annotations.kind, entries), img.id + "f")


def _crop(img: AnnotatedImage, ox: int, oy: int, cw: int, ch: int, tag: str) -> AnnotatedImage:
    pixels = img.pixels[:, oy:oy + ch, ox:ox + cw].copy()
    if img.annotations.kind == "points":
        entries = [(x - ox, y - oy) for x, y in img.annotations.entries
                   if ox <= x < ox + cw and oy <= y < oy + ch]
    else:
        entries = []
        for xmin, ymin, xmax, ymax in img.annotations.entries:
            cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
            if not (ox <= cx < ox + cw and oy <= cy < oy + ch):
                continue  # boxes survive only when their centre is inside
            entries.append((max(xmin - ox, 0), max(ymin - oy, 0),
                            min(xmax - ox, cw - 1), min(ymax - oy, ch - 1)))
    return AnnotatedImage(pixels, AnnotationSet(img.annotations.kind, entries),
                          f"{img.id}#{tag}")


def augment(img: AnnotatedImage, seed: int) -> list[AnnotatedImage]:
    """Nine half-size crops, each followed by its horizontal mirror (18 total).

    Crops 1-4 are the non-overlapping quadrants, origins (x, y) =
    (0, 0), (W/2, 0), (0, H/2), (W/2, H/2); crops 5-9 start at PCG64-seeded
    uniform origins anywhere the crop fits. Annotations are translated into
    each crop frame; entries outside are dropped (boxes by centre test).
    """
    h, w = img.height, img.width
    if h % 2 or w % 2:
        raise ShapeError(f"augment needs even extents, got {h}x{w}")
    ch, cw = h // 2, w // 2
    origins = [(0, 0), (cw, 0), (0, ch), (cw, ch)]
    rng = np.random.Generator(np.random.PCG64(seed))
    for _ in range(5):
        origins.append((int(rng.integers(0, w - cw + 1)), int(rng.integers(0, h - ch + 1))))
    out = []
    for i, (ox, oy) in enumerate(origins):
        crop = _crop(img, ox, oy, cw, ch, f"crop{i + 1}")
        out.append(crop)
        out.append(hflip(crop))
    return out


def pad_to_multiple(pixels: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad the bottom/right spatial edges up to the next multiple."""
    h, w = pixels.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return pixels
    pad = [(0, 0)] * (pixels.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(pixels, pad)


# ---------------------------------------------------------------------------
# synthetic scenes with constructive ground truth


def synth_scene(seed: int, width: int, height: int, n_objects: int,
                blob_radius_range: tuple[float, float] = (4.0, 9.0)) -> AnnotatedImage:
    """Render soft circular blobs over a textured background.

    Annotation points are the blob centres, so the ground-truth count is
    exact by construction. Placement uses rejection sampling to limit
    overlap; if a blob cannot be placed after bounded retries the scene
    simply carries fewer objects (the annotations always tell the truth).
    Identical seeds give bit-identical scenes.
    """
    if n_objects < 0:
        raise ConfigError("n_objects must be >= 0")
    r_lo, r_hi = blob_radius_range
    if not (0 < r_lo <= r_hi):
        raise ConfigError(f"bad blob radius range {blob_radius_range}")
    rng = np.random.Generator(np.random.PCG64(seed))
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]

    # low-frequency waves plus pixel noise; kept dim so blobs stand out
    base = np.full((height, width), 0.22)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        base += 0.05 * np.sin(2 * np.pi * (fx * xs / width + fy * ys / height) + phase)
    base += rng.normal(0.0, 0.015, (height, width))

    placed: list[tuple[float, float, float]] = []
    for _ in range(n_objects):
        radius = float(rng.uniform(r_lo, r_hi))
        margin = radius + 2.0
        if 2 * margin >= min(width, height):
            break
        for _ in range(200):
            cx = float(rng.uniform(margin, width - 1 - margin))
            cy = float(rng.uniform(margin, height - 1 - margin))
            if all((cx - px) ** 2 + (cy - py) ** 2 >= (0.8 * (radius + pr)) ** 2
                   for px, py, pr in placed):
                placed.append((cx, cy, radius))
                break

    tint = np.array([1.0, 0.92, 0.85])
    pixels = np.repeat(base[None], 3, axis=0)
    for cx, cy, radius in placed:
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * (0.45 * radius) ** 2))
        amp = rng.uniform(0.45, 0.7)
        pixels += amp * tint[:, None, None] * bump[None]
    pixels = np.clip(pixels, 0.0, 1.0)

    points = [(cx, cy) for cx, cy, _ in placed]
    return AnnotatedImage(pixels, AnnotationSet("points", points), id=f"synth{seed}")


def write_synth_dataset(out_dir, n_images: int, width: int, height: int,
                        count_range: tuple[int, int], seed: int,
                        train_fraction: float = 0.8) -> Path:
    """Generate a synthetic dataset on disk and return the manifest path.

    Writes 8-bit PNGs plus per-image annotation JSONs and a manifest with a
    seeded, disjoint and exhaustive train/test split.
    """
    if n_images < 1:
        raise ConfigError("n_images must be >= 1")
    lo, hi = count_range
    if not (0 <= lo <= hi):
        raise ConfigError(f"bad count range {count_range}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)

    rng = np.random.Generator(np.random.PCG64(seed))
    n_train = int(round(n_images * train_fraction))
    split_order = rng.permutation(n_images)
    splits = {int(idx): ("train" if pos < n_train else "test")
              for pos, idx in enumerate(split_order)}

    records = []
    for i in range(n_images):
        n_objects = int(rng.integers(lo, hi + 1))
        scene = synth_scene(seed=int(rng.integers(0, 2 ** 31)), width=width, height=height,
                            n_objects=n_objects)
        name = f"scene_{i:04d}"
        img8 = np.round(scene.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img8).save(out_dir / "images" / f"{name}.png")
        record = {"image": f"images/{name}.png",
                  "points": [[x, y] for x, y in scene.annotations.entries],
                  "split": splits[i]}
        (out_dir / "annotations" / f"{name}.json").write_text(
            json.dumps({"image": record["image"], "points": record["points"]}, sort_keys=True))
        records.append(record)

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(records, indent=1, sort_keys=True))
    return manifest_path
