"""Procedural class-conditional image datasets."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

KINDS = ("colored-shapes", "ring-gaussians-as-images")
SHAPES = ("square", "circle", "triangle")


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "colored-shapes"
    n_classes: int = 3
    image_size: int = 16
    samples_per_class: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.image_size < 8:
            raise ValueError(f"image size must be >= 8, got {self.image_size}")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")


def class_color(c: int, n_classes: int) -> np.ndarray:
    """RGB in [0, 1] for class ``c``: evenly spaced hues."""
    return np.array(colorsys.hsv_to_rgb(c / n_classes, 0.85, 0.95))


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # upward triangle with apex at (cy - r, cx) and base on y = cy + r
    t = (yy - (cy - r)) / (2 * r)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * r)


def _colored_shape(rng, c, spec):
    s = spec.image_size
    r = rng.uniform(0.22, 0.36) * s
    cy, cx = rng.uniform(r, s - r, size=2)
    bg = rng.uniform(-0.85, -0.55)
    img = np.full((3, s, s), bg) + rng.normal(0.0, 0.05, size=(3, s, s))
    mask = _shape_mask(SHAPES[c % len(SHAPES)], s, cy, cx, r)
    color = class_color(c, spec.n_classes) * rng.uniform(0.85, 1.0) * 2 - 1
    img[:, mask] = color[:, None] + rng.normal(0.0, 0.03, size=(3, int(mask.sum())))
    return img


def _ring_gaussian(rng, c, spec):
    s = spec.image_size
    angle = 2 * np.pi * c / spec.n_classes + rng.normal(0, 0.08)
    rad = 0.3 * s + rng.normal(0, 0.03 * s)
    cy, cx = s / 2 + rad * np.sin(angle), s / 2 + rad * np.cos(angle)
    sigma = rng.uniform(1.2, 1.8) * s / 16
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img = -0.9 + 1.8 * blob + rng.normal(0.0, 0.03, size=(s, s))
    return np.repeat(img[None], 3, axis=0)


def generate_dataset(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Images [N, 3, S, S] float32 in [-1, 1] and int64 labels, exactly balanced, shuffled."""
    rng = np.random.default_rng(spec.seed)
    draw = _colored_shape if spec.kind == "colored-shapes" else _ring_gaussian
    n = spec.n_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, spec.image_size, spec.image_size), np.float32)
    for i, c in enumerate(labels):
        images[i] = np.clip(draw(rng, int(c), spec), -1.0, 1.0)
    return images, labels.astype(np.int64)


def iterate(spec: SynthSpec):
    images, labels = generate_dataset(spec)
    for img, lab in zip(images, labels):
        yield img, int(lab)


def mean_colors(images: np.ndarray) -> np.ndarray:
    """Per-image mean RGB, [N, 3]."""
    return images.astype(np.float64).mean(axis=(2, 3))


def class_statistics(images: np.ndarray, labels: np.ndarray, net=None) -> list[dict]:
    """One row per class present: mean color, intra-class color spread, and (given a net) accuracy.

    ``color_std`` is the RMS distance of per-image mean colors from the class mean.
    """
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("no images")
    colors = mean_colors(images)
    preds = net.predict(images) if net is not None else None
    rows = []
    for c in np.unique(labels):
        sel = labels == c
        mc = colors[sel].mean(axis=0)
        row = {"label": int(c), "count": int(sel.sum()), "mean_color": mc,
               "color_std": float(np.sqrt(((colors[sel] - mc) ** 2).sum(axis=1).mean()))}
        if preds is not None:
            row["accuracy"] = float((preds[sel] == c).mean())
        rows.append(row)
    return rows
