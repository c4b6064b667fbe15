"""Synthetic few-shot segmentation dataset: rendering, on-disk layout, loading.

Layout::

    <root>/manifest.txt     "<image-relpath> <mask-relpath> <class_id>" per line, '#' comments
    <root>/images/*.ppm     binary P6, 8-bit
    <root>/masks/*.pgm      binary P5, 8-bit, 255 = foreground, 0 = background

Each class is a parametric shape drawn in a class-specific hue (jittered per
sample) at a random position, scale and rotation over a low-saturation noise
texture. With probability ``distractor_prob`` a shape of another class is
drawn first; the target is drawn on top and only its pixels enter the mask.
"""
from __future__ import annotations

import colorsys
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm

SHAPES = ("circle", "square", "triangle", "ring", "cross", "bar", "ellipse", "star")
MANIFEST_NAME = "manifest.txt"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    classes: int = 8
    samples_per_class: int = 50
    image_size: int = 64
    seed: int = 0
    distractor_prob: float = 0.5

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must be in [0, 1]")


# ----------------------------------------------------------------- rasterising


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def _polygon_mask(u: np.ndarray, v: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test for points (u, v) against closed ``verts``."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        crosses = (y0 > v) != (y1 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0 + (v - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (u < x_at)
    return inside


def shape_mask(kind: str, size: int, center: tuple[float, float], radius: float, angle: float = 0.0) -> np.ndarray:
    """Boolean ``size x size`` raster of a shape, sampled at pixel centres (integer coords)."""
    xs, ys = _pixel_grid(size)
    dx, dy = xs - center[0], ys - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = radius
    if kind == "circle":
        return u * u + v * v <= r * r
    if kind == "square":
        half = 0.8 * r
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if kind == "triangle":
        t = np.deg2rad([90.0, 210.0, 330.0])
        return _polygon_mask(u, v, np.stack([r * np.cos(t), -r * np.sin(t)], axis=1))
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        arm = 0.3 * r
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if kind == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    if kind == "ellipse":
        return (u / r) ** 2 + (v / (0.55 * r)) ** 2 <= 1.0
    if kind == "star":
        t = np.deg2rad(90.0 + 36.0 * np.arange(10))
        rad = np.where(np.arange(10) % 2 == 0, r, 0.45 * r)
        return _polygon_mask(u, v, np.stack([rad * np.cos(t), -rad * np.sin(t)], axis=1))
    raise ValueError(f"unknown shape {kind!r}")


def class_shape(class_id: int) -> str:
    return SHAPES[class_id % len(SHAPES)]


def class_hue(class_id: int, classes: int) -> float:
    return (class_id / classes) % 1.0


def _bilinear_up(small: np.ndarray, size: int) -> np.ndarray:
    from .ops import interp_matrix

    my = interp_matrix(small.shape[0], size)
    mx = interp_matrix(small.shape[1], size)
    return np.einsum("ij,jkc,lk->ilc", my, small, mx)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.2), rng.uniform(0.3, 0.7)))
    coarse = rng.normal(0.0, 0.12, size=(8, 8, 3))
    tex = _bilinear_up(coarse, size)
    fine = rng.normal(0.0, 0.03, size=(size, size, 3))
    return base + tex + fine


def _shape_color(rng: np.random.Generator, class_id: int, classes: int) -> np.ndarray:
    hue = class_hue(class_id, classes) + rng.uniform(-0.03, 0.03)
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, rng.uniform(0.6, 0.9), rng.uniform(0.65, 0.95)))


def _place(rng: np.random.Generator, size: int) -> tuple[tuple[float, float], float, float]:
    radius = rng.uniform(0.12, 0.25) * size
    lo, hi = radius, size - 1 - radius
    center = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    return center, radius, rng.uniform(0.0, 2 * np.pi)


def render_sample(
    rng: np.random.Generator, class_id: int, classes: int, size: int = 64, distractor_prob: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """One ``(H, W, 3)`` uint8 image and its boolean target mask."""
    img = _background(rng, size)
    if classes > 1 and rng.random() < distractor_prob:
        other = int(rng.integers(classes - 1))
        other += other >= class_id
        center, radius, angle = _place(rng, size)
        dm = shape_mask(class_shape(other), size, center, radius, angle)
        img[dm] = _shape_color(rng, other, classes) + rng.normal(0.0, 0.03, size=(int(dm.sum()), 3))
    while True:
        center, radius, angle = _place(rng, size)
        mask = shape_mask(class_shape(class_id), size, center, radius, angle)
        if 0 < mask.sum() < mask.size:
            break
    img[mask] = _shape_color(rng, class_id, classes) + rng.normal(0.0, 0.03, size=(int(mask.sum()), 3))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), mask


# --------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Sample:
    image_path: str
    mask_path: str
    class_id: int


@dataclass
class DatasetManifest:
    root: Path
    samples: list[Sample]
    image_size: tuple[int, int]
    _images: list[np.ndarray] = field(default_factory=list, repr=False)
    _masks: list[np.ndarray] = field(default_factory=list, repr=False)
    _by_class: Optional[dict[int, list[int]]] = field(default=None, repr=False, compare=False)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted({s.class_id for s in self.samples}))

    def __len__(self) -> int:
        return len(self.samples)

    def indices_of_class(self, class_id: int) -> list[int]:
        if self._by_class is None:
            by_class: dict[int, list[int]] = {}
            for i, s in enumerate(self.samples):
                by_class.setdefault(s.class_id, []).append(i)
            self._by_class = by_class
        return list(self._by_class.get(int(class_id), []))

    def image(self, i: int) -> np.ndarray:
        """``(3, H, W)`` float32 in [0, 1]."""
        return self._images[i].transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)

    def mask(self, i: int) -> np.ndarray:
        """``(H, W)`` uint8 in {0, 1}."""
        return (self._masks[i] == 255).astype(np.uint8)

    def raw_image(self, i: int) -> np.ndarray:
        return self._images[i]


def generate_synthetic_dataset(cfg: DatasetConfig, out_dir: Union[str, os.PathLike]) -> DatasetManifest:
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc.strerror or exc}") from exc
    samples, images, masks = [], [], []
    lines = [
        "# synthetic few-shot segmentation dataset",
        f"# classes={cfg.classes} samples_per_class={cfg.samples_per_class} "
        f"image_size={cfg.image_size} seed={cfg.seed} distractor_prob={cfg.distractor_prob}",
    ]
    for c in range(cfg.classes):
        for k in range(cfg.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, c, k]))
            img, mask = render_sample(rng, c, cfg.classes, cfg.image_size, cfg.distractor_prob)
            stem = f"c{c:02d}_{k:04d}"
            ipath, mpath = f"images/{stem}.ppm", f"masks/{stem}.pgm"
            m8 = np.where(mask, 255, 0).astype(np.uint8)
            write_ppm(root / ipath, img)
            write_pgm(root / mpath, m8)
            samples.append(Sample(ipath, mpath, c))
            images.append(img)
            masks.append(m8)
            lines.append(f"{ipath} {mpath} {c}")
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    size = (cfg.image_size, cfg.image_size)
    return DatasetManifest(root, samples, size, images, masks)


def load_dataset(path: Union[str, os.PathLike]) -> DatasetManifest:
    """Parse and validate a dataset directory (or its manifest file)."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    root = manifest_path.parent
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: manifest not found")
    samples, images, masks = [], [], []
    size: Optional[tuple[int, int]] = None
    for lineno, raw in enumerate(manifest_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ManifestError(f"{manifest_path}:{lineno}: expected '<image> <mask> <class_id>', got {raw!r}")
        ipath, mpath, cls = parts
        try:
            class_id = int(cls)
        except ValueError:
            raise ManifestError(f"{manifest_path}:{lineno}: class id {cls!r} is not an integer") from None
        if class_id < 0:
            raise ManifestError(f"{manifest_path}:{lineno}: negative class id {class_id}")
        try:
            img = read_ppm(root / ipath)
            m = read_pgm(root / mpath)
        except FileNotFoundError as exc:
            raise ManifestError(f"{manifest_path}:{lineno}: {exc}") from None
        except NetpbmError as exc:
            raise ManifestError(f"{manifest_path}:{lineno}: {exc}") from None
        bad = np.setdiff1d(np.unique(m), [0, 255])
        if bad.size:
            raise ManifestError(f"{root / mpath}: mask contains non-binary value {int(bad[0])} (allowed: 0, 255)")
        if not np.any(m == 255):
            raise ManifestError(f"{root / mpath}: mask has empty foreground")
        if img.shape[:2] != m.shape:
            raise ManifestError(f"{manifest_path}:{lineno}: image {img.shape[:2]} and mask {m.shape} sizes differ")
        if size is None:
            size = m.shape
        elif m.shape != size:
            raise ManifestError(f"{manifest_path}:{lineno}: size {m.shape} differs from dataset size {size}")
        samples.append(Sample(ipath, mpath, class_id))
        images.append(img)
        masks.append(m)
    if not samples:
        raise ManifestError(f"{manifest_path}: no samples")
    return DatasetManifest(root, samples, size, images, masks)


def manifest_checksum(path: Union[str, os.PathLike]) -> str:
    """SHA-256 over the manifest and every file it references, in manifest order."""
    m = load_dataset(path)
    h = hashlib.sha256((m.root / MANIFEST_NAME).read_bytes())
    for s in m.samples:
        h.update((m.root / s.image_path).read_bytes())
        h.update((m.root / s.mask_path).read_bytes())
    return h.hexdigest()
