"""Synthetic shape datasets.

Classification: one shape per image, 10 classes = 5 shapes x {solid, striped}.
Segmentation: 1-4 circles/squares/triangles on the same kind of background,
per-pixel labels 0 (background), 1 circle, 2 square, 3 triangle.

Both tasks draw from the same renderer so one backbone serves both.
"""

from dataclasses import dataclass

import numpy as np
import torch

CLS_SHAPES = ("circle", "square", "triangle", "cross", "ring")
SEG_SHAPES = ("circle", "square", "triangle")
NUM_CLS_CLASSES = 2 * len(CLS_SHAPES)
NUM_SEG_CLASSES = 1 + len(SEG_SHAPES)


@dataclass
class SynthDatasets:
    cls_train: tuple
    cls_val: tuple
    seg_train: tuple
    seg_val: tuple
    seed: int
    num_classes: int = NUM_CLS_CLASSES
    seg_classes: int = NUM_SEG_CLASSES


def shape_mask(kind, size, cy, cx, r, angle=0.0):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        # upward triangle inscribed in radius r, rotated by angle
        return (v <= r * 0.5) & (v >= -r + 1.8 * np.abs(u))
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if kind == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(kind)


def _background(rng, size, channels):
    base = rng.uniform(-0.3, 0.3, size=(channels, 1, 1))
    ramp = np.linspace(-1, 1, size)
    gy, gx = rng.uniform(-0.2, 0.2, size=2)
    img = base + gy * ramp[None, :, None] + gx * ramp[None, None, :]
    return img + rng.normal(0, 0.1, size=(channels, size, size))


def _paint(rng, img, mask, striped):
    channels, size, _ = img.shape
    color = rng.uniform(0.4, 1.0, size=(channels, 1, 1)) * rng.choice([-1, 1], size=(channels, 1, 1))
    fill = np.broadcast_to(color, img.shape).copy()
    if striped:
        period = rng.integers(2, 4)
        yy, xx = np.mgrid[0:size, 0:size]
        band = ((yy + xx) // period) % 2 == 0
        fill = np.where(band[None], fill, -0.5 * fill)
    img[:, mask] = fill[:, mask]
    return img


def make_classification(rng, n, size=32, channels=3):
    xs = np.empty((n, channels, size, size), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = int(rng.integers(NUM_CLS_CLASSES))
        kind, striped = CLS_SHAPES[label // 2], bool(label % 2)
        r = rng.uniform(0.25, 0.4) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        img = _background(rng, size, channels)
        mask = shape_mask(kind, size, cy, cx, r, rng.uniform(-0.3, 0.3))
        xs[i] = _paint(rng, img, mask, striped)
        ys[i] = label
    return torch.from_numpy(xs), torch.from_numpy(ys)


def make_segmentation(rng, n, size=32, channels=3):
    xs = np.empty((n, channels, size, size), dtype=np.float32)
    ys = np.empty((n, size, size), dtype=np.int64)
    for i in range(n):
        img = _background(rng, size, channels)
        label = np.zeros((size, size), dtype=np.int64)
        for _ in range(int(rng.integers(1, 5))):
            cls = int(rng.integers(len(SEG_SHAPES)))
            r = rng.uniform(0.12, 0.3) * size
            cy, cx = rng.uniform(0, size, size=2)
            mask = shape_mask(SEG_SHAPES[cls], size, cy, cx, r, rng.uniform(-0.3, 0.3))
            img = _paint(rng, img, mask, bool(rng.integers(2)))
            label[mask] = cls + 1
        xs[i] = img
        ys[i] = label
    return torch.from_numpy(xs), torch.from_numpy(ys)


def generate_datasets(seed, n_cls_train=1000, n_cls_val=500, n_seg_train=500,
                      n_seg_val=200, image_size=32, channels=3) -> SynthDatasets:
    sizes = (n_cls_train, n_cls_val, n_seg_train, n_seg_val)
    if min(sizes) <= 0 or image_size <= 0:
        raise ValueError("dataset sizes must be positive")
    # one independent stream per split keeps train and val disjoint draws
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    return SynthDatasets(
        cls_train=make_classification(streams[0], n_cls_train, image_size, channels),
        cls_val=make_classification(streams[1], n_cls_val, image_size, channels),
        seg_train=make_segmentation(streams[2], n_seg_train, image_size, channels),
        seg_val=make_segmentation(streams[3], n_seg_val, image_size, channels),
        seed=seed,
    )


def datasets_for(config) -> SynthDatasets:
    return generate_datasets(config.seed, config.n_cls_train, config.n_cls_val,
                             config.n_seg_train, config.n_seg_val, config.image_size,
                             config.in_channels)


def batches(data, batch_size, seed=None, shuffle=True):
    """Yield minibatches; the order is a pure function of ``seed``."""
    x, y = data
    n = x.shape[0]
    if shuffle:
        g = torch.Generator().manual_seed(int(seed if seed is not None else 0))
        order = torch.randperm(n, generator=g)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield x[idx], y[idx]


def save_datasets(ds: SynthDatasets, path):
    torch.save({"seed": ds.seed, "cls_train": ds.cls_train, "cls_val": ds.cls_val,
                "seg_train": ds.seg_train, "seg_val": ds.seg_val,
                "num_classes": ds.num_classes, "seg_classes": ds.seg_classes}, path)


def load_datasets(path) -> SynthDatasets:
    blob = torch.load(path, weights_only=False)
    return SynthDatasets(blob["cls_train"], blob["cls_val"], blob["seg_train"],
                         blob["seg_val"], blob["seed"], blob["num_classes"],
                         blob["seg_classes"])
