"""Procedural corpora: smooth "natural-like" images and labelled shape scenes."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.special import expit

from .core import BBox, RandomSource, save_png

PERSON = "person"
DEFAULT_CLASSES = (PERSON, "disc", "slab")


def _palette(rng: np.random.Generator, k: int, spread: float = 0.08) -> np.ndarray:
    base = rng.uniform()
    cols = []
    for _ in range(k):
        h = (base + rng.normal(0, spread)) % 1.0
        s = rng.uniform(0.2, 0.9)
        v = rng.uniform(0.1, 1.0)
        cols.append(colorsys.hsv_to_rgb(h, s, v))
    return np.array(cols, dtype=np.float64)


def smooth_field(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency noise in [0, 1], bicubic-free: bilinear upsampling of a coarse grid."""
    coarse = torch.from_numpy(rng.uniform(size=(1, 1, cells, cells)))
    up = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear",
                                         align_corners=True)
    return up[0, 0].numpy()


def natural_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """One "natural-like" image as a (3, size, size) float array in [0, 1].

    A two-color ramp background carries 3 to 7 layered regions: soft blobs,
    hard-edged ellipses, rotated rectangles and striped ellipses, all drawn
    from one loose palette and modulated by a smooth illumination field.
    """
    pal = _palette(rng, 5, spread=0.15)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) + 0.5
    ramp = np.clip(ramp, 0, 1)[..., None]
    img = pal[0] * (1 - ramp) + pal[1] * ramp
    edge = float(size)  # logistic edge width of about one pixel
    for _ in range(rng.integers(3, 8)):
        cx, cy = rng.uniform(0, 1, size=2)
        sx, sy = rng.uniform(0.05, 0.22, size=2)
        theta = rng.uniform(0, np.pi)
        u = np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)
        v = -np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)
        kind = rng.integers(0, 4)
        if kind == 1:  # hard ellipse
            mask = expit(edge * min(sx, sy) * (1.0 - np.sqrt((u / sx) ** 2 + (v / sy) ** 2)))
        elif kind == 2:  # rectangle
            mask = expit(edge * np.minimum(sx - np.abs(u), sy - np.abs(v)))
        else:  # soft blob, optionally striped
            mask = expit(4.0 * (1.0 - (u / sx) ** 2 - (v / sy) ** 2))
        color = pal[rng.integers(0, len(pal))]
        if kind == 3:
            period = rng.uniform(0.04, 0.12)
            stripes = expit(4.0 * np.sin(2 * np.pi * u / period))[..., None]
            color = color * stripes + pal[rng.integers(0, len(pal))] * (1 - stripes)
        mask = mask[..., None]
        img = img * (1 - mask) + color * mask
    img = img * (0.85 + 0.3 * smooth_field(rng, size)[..., None])
    return np.clip(img, 0, 1).transpose(2, 0, 1)


def natural_corpus(n: int, size: int, rng: RandomSource) -> list[torch.Tensor]:
    return [torch.from_numpy(natural_image(rng.np, size).astype(np.float32)) for _ in range(n)]


# --------------------------------------------------------------------------
# shape scenes

@dataclass
class GridConfig:
    grid_size: int = 8
    classes: tuple[str, ...] = DEFAULT_CLASSES
    person_class: str = PERSON
    confidence_threshold: float = 0.5
    image_size: int = 64

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if self.classes.count(self.person_class) != 1:
            raise ValueError(f"exactly one {self.person_class!r} class required")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must lie in (0, 1)")
        if self.image_size % self.grid_size:
            raise ValueError("image_size must be divisible by grid_size")

    @property
    def person_index(self) -> int:
        return self.classes.index(self.person_class)


@dataclass
class SynthScene:
    image: torch.Tensor
    objects: list[tuple[BBox, str]] = field(default_factory=list)

    def boxes(self, label: str | None = None) -> list[BBox]:
        return [b for b, c in self.objects if label is None or c == label]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    pal = _palette(rng, 2)
    t = smooth_field(rng, size, cells=rng.integers(3, 7))[..., None]
    img = pal[0] * (1 - t) + pal[1] * t
    img += rng.normal(0, 0.02, size=img.shape)
    return img


def _shape_size(kind: str, rng: np.random.Generator) -> tuple[float, float]:
    if kind == PERSON:
        h = rng.uniform(0.42, 0.75)
        return h * rng.uniform(0.36, 0.46), h
    if kind == "disc":
        d = rng.uniform(0.2, 0.38)
        return d, d
    w = rng.uniform(0.3, 0.5)
    return w, w * rng.uniform(0.35, 0.55)


def _draw(img: np.ndarray, kind: str, box: tuple[float, float, float, float],
          rng: np.random.Generator) -> None:
    size = img.shape[0]
    x0, y0, x1, y1 = (v * size for v in box)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    def rect(ax0, ay0, ax1, ay1):
        return (xx >= ax0) & (xx < ax1) & (yy >= ay0) & (yy < ay1)

    def paint(mask, color):
        img[mask] = color

    def color():
        c = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 1.0),
                                         rng.uniform(0.2, 1.0)))
        return c

    w, h = x1 - x0, y1 - y0
    if kind == PERSON:
        head_r = 0.13 * h
        hx, hy = (x0 + x1) / 2, y0 + head_r
        body = color()
        legs = color()
        paint(rect(x0 + 0.18 * w, y0 + 2 * head_r, x1 - 0.18 * w, y0 + 0.62 * h), body)
        # arms
        paint(rect(x0, y0 + 2.1 * head_r, x0 + 0.18 * w, y0 + 0.55 * h), body * 0.85)
        paint(rect(x1 - 0.18 * w, y0 + 2.1 * head_r, x1, y0 + 0.55 * h), body * 0.85)
        paint(rect(x0 + 0.2 * w, y0 + 0.62 * h, x0 + 0.45 * w, y1), legs)
        paint(rect(x0 + 0.55 * w, y0 + 0.62 * h, x1 - 0.2 * w, y1), legs)
        skin = np.array(colorsys.hsv_to_rgb(rng.uniform(0.03, 0.1), rng.uniform(0.3, 0.6),
                                            rng.uniform(0.35, 0.95)))
        paint((xx - hx) ** 2 + (yy - hy) ** 2 <= head_r ** 2, skin)
    elif kind == "disc":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        paint(((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0, color())
    else:
        paint(rect(x0, y0, x1, y1), color())
        paint(rect(x0 + 0.1 * w, y0 + 0.15 * h, x1 - 0.1 * w, y0 + 0.5 * h), color())


def _overlaps(a, b, margin=0.02) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_scene(cfg: GridConfig, rng: np.random.Generator) -> SynthScene:
    size = cfg.image_size
    img = _background(rng, size)
    placed: list[tuple[tuple[float, float, float, float], str]] = []
    n_obj = int(rng.integers(1, 4))
    for _ in range(n_obj):
        kind = cfg.classes[int(rng.integers(0, len(cfg.classes)))]
        for _attempt in range(20):
            w, h = _shape_size(kind, rng)
            x0 = rng.uniform(0, 1 - w)
            y0 = rng.uniform(0, 1 - h)
            cand = (x0, y0, x0 + w, y0 + h)
            if not any(_overlaps(cand, p) for p, _ in placed):
                placed.append((cand, kind))
                break
    objects = []
    for box, kind in placed:
        _draw(img, kind, box, rng)
        objects.append((BBox.from_xyxy(*box), kind))
    image = torch.from_numpy(np.clip(img, 0, 1).transpose(2, 0, 1).astype(np.float32))
    return SynthScene(image, objects)


def generate_synthetic_dataset(n: int, cfg: GridConfig, rng: RandomSource) -> list[SynthScene]:
    if n < 1:
        raise ValueError("n must be at least 1")
    return [generate_scene(cfg, rng.np) for _ in range(n)]


def dump_scenes(scenes: list[SynthScene], out_dir) -> None:
    """Write scenes as PNG files with a JSON label sidecar per image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        stem = f"scene_{i:05d}"
        save_png(scene.image, out / f"{stem}.png")
        labels = [{"class": c, "cx": b.cx, "cy": b.cy, "w": b.w, "h": b.h}
                  for b, c in scene.objects]
        (out / f"{stem}.json").write_text(json.dumps(labels, indent=1))


def load_scene_labels(out_dir) -> list[list[tuple[BBox, str]]]:
    out = Path(out_dir)
    result = []
    for p in sorted(out.glob("scene_*.json")):
        result.append([(BBox(d["cx"], d["cy"], d["w"], d["h"]), d["class"])
                       for d in json.loads(p.read_text())])
    return result
