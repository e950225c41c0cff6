"""Synthetic fundus-like phantoms for tests and offline demos.

A bright disk (the FOV) on black with a branching tree of darker curved
vessels.  Deterministic for a given seed.
"""
from pathlib import Path

import cv2
import numpy as np

from .data import DATASET_IDS, RASTER_SHAPE, FundusSample, canonical_name, write_sample


def _vessel_tree(shape, rng, n_roots=6, max_depth=4):
    h, w = shape
    canvas = np.zeros(shape, dtype=np.uint8)
    cy, cx = h / 2 + rng.uniform(-0.05, 0.05) * h, w / 2 + rng.uniform(-0.05, 0.05) * w
    stack = []
    for k in range(n_roots):
        ang = 2 * np.pi * k / n_roots + rng.uniform(-0.3, 0.3)
        stack.append((cy, cx, ang, max(2, int(min(h, w) / 90)) + 2, 0))
    while stack:
        y, x, ang, width, depth = stack.pop()
        length = rng.uniform(0.12, 0.25) * min(h, w)
        pts = [(x, y)]
        for _ in range(12):
            ang += rng.normal(0, 0.15)
            y += np.sin(ang) * length / 12
            x += np.cos(ang) * length / 12
            pts.append((x, y))
        cv2.polylines(canvas, [np.round(np.array(pts)).astype(np.int32)], False, 1, thickness=max(1, width))
        if depth < max_depth:
            for sign in (-1, 1):
                stack.append((y, x, ang + sign * rng.uniform(0.3, 0.8), max(1, width - 1), depth + 1))
    return canvas


def make_fundus(shape=(584, 565), seed=0, sample_id="synthetic", dataset="DRIVE"):
    """Return a FundusSample phantom of the given (height, width)."""
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    radius = 0.46 * min(h, w)
    fov = (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2).astype(np.uint8)
    vessels = _vessel_tree(shape, rng) & fov
    shade = 0.75 + 0.25 * np.cos(np.hypot(yy - cy, xx - cx) / radius * np.pi / 2)
    base = np.stack([200 * shade, 110 * shade, 60 * shade], axis=-1)
    soft = cv2.GaussianBlur(vessels.astype(np.float64), (0, 0), 0.8)
    img = base * (1.0 - 0.45 * soft[..., None])
    img += rng.normal(0, 4.0, img.shape)
    img *= fov[..., None]
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return FundusSample(sample_id, image, vessels.astype(np.uint8), fov, canonical_name(dataset))


def write_synthetic_dataset(root, name="DRIVE", n_train=None, n_test=None, seed=0):
    """Populate ``root`` with a phantom dataset in the documented layout."""
    name = canonical_name(name)
    shape = RASTER_SHAPE[name]
    written = {}
    for split, n in (("train", n_train), ("test", n_test)):
        ids = DATASET_IDS[(name, split)]
        ids = ids if n is None else ids[:n]
        base = Path(root) / name / split
        for i, sid in enumerate(ids):
            sample = make_fundus(shape, seed=seed * 1000 + (0 if split == "train" else 500) + i,
                                 sample_id=sid, dataset=name)
            write_sample(base, sample)
        written[split] = ids
    return written
