"""Joint stochastic augmentation of (image patch, label patch) pairs.

Geometric transforms warp image and label with the same sampling grid
(bilinear for the image, nearest for the label, reflect-101 borders).
Photometric transforms touch the image only and clamp it to [0, 1].
Transforms run in a fixed order and each fires independently with its own
probability.
"""
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels

TRANSFORM_ORDER = (
    "random_sized_crop_pad",
    "vertical_flip",
    "rotate90",
    "elastic",
    "grid_distortion",
    "optical_distortion",
    "brightness_contrast",
    "random_gamma",
)
GEOMETRIC = frozenset(TRANSFORM_ORDER[:6])

DEFAULT_PROBABILITIES = {
    "random_sized_crop_pad": 0.5,
    "vertical_flip": 0.5,
    "rotate90": 0.5,
    "elastic": 0.5,
    "grid_distortion": 0.5,
    "optical_distortion": 0.8,
    "brightness_contrast": 0.8,
    "random_gamma": 0.8,
}


@dataclass
class AugmentConfig:
    probabilities: dict = field(default_factory=lambda: dict(DEFAULT_PROBABILITIES))
    crop_scale: tuple = (0.8, 1.0)
    crop_mode: str = "resize"  # or "pad"
    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    grid_steps: int = 5
    grid_limit: float = 0.3
    optical_limit: float = 0.05
    optical_shift: float = 0.05
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    gamma_range: tuple = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        probs = dict(DEFAULT_PROBABILITIES)
        probs.update(self.probabilities or {})
        unknown = set(probs) - set(TRANSFORM_ORDER)
        if unknown:
            raise ValueError(f"unknown transforms in probability table: {sorted(unknown)}")
        for name, p in probs.items():
            if not 0.0 <= float(p) <= 1.0:
                raise ValueError(f"probability for {name} must lie in [0, 1], got {p}")
        self.probabilities = {k: float(probs[k]) for k in TRANSFORM_ORDER}
        self.crop_scale = tuple(self.crop_scale)
        self.gamma_range = tuple(self.gamma_range)
        if self.crop_mode not in ("resize", "pad"):
            raise ValueError("crop_mode must be 'resize' or 'pad'")

    @classmethod
    def disabled(cls, **kw):
        return cls(probabilities={k: 0.0 for k in TRANSFORM_ORDER}, **kw)

    @classmethod
    def only(cls, name, p=1.0, **kw):
        probs = {k: 0.0 for k in TRANSFORM_ORDER}
        probs[name] = p
        return cls(probabilities=probs, **kw)

    def to_dict(self):
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        d["gamma_range"] = list(self.gamma_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# sampling-grid helpers
# --------------------------------------------------------------------------


def _identity_grid(h, w):
    rows, cols = np.mgrid[0:h, 0:w]
    return rows.astype(np.float64), cols.astype(np.float64)


def _spatial(fn, arr):
    """Apply a 2-D function over the trailing two axes of ``arr``."""
    if arr.ndim == 2:
        return fn(arr)
    lead = arr.shape[:-2]
    flat = arr.reshape((-1,) + arr.shape[-2:])
    out = np.stack([fn(a) for a in flat])
    return out.reshape(lead + out.shape[-2:])


def warp_pair(image, label, rows, cols):
    img_dtype = np.asarray(image).dtype
    warped = _spatial(lambda a: _kernels.remap(a, rows, cols, order=1), image).astype(img_dtype)
    warped_label = None
    if label is not None:
        warped_label = _spatial(lambda a: _kernels.remap(a, rows, cols, order=0), label)
    return warped, warped_label


# --------------------------------------------------------------------------
# geometric transforms
# --------------------------------------------------------------------------


def vertical_flip(image, label=None):
    image = np.ascontiguousarray(np.flip(image, axis=-2))
    if label is not None:
        label = np.ascontiguousarray(np.flip(label, axis=-2))
    return image, label


def rotate90(image, label=None, k=1):
    image = np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))
    if label is not None:
        label = np.ascontiguousarray(np.rot90(label, k, axes=(-2, -1)))
    return image, label


def random_sized_crop_pad(image, label=None, scale=1.0, top=0, left=0, mode="resize"):
    """Crop a square of side ``round(scale * H)`` and bring it back to H x W.

    ``mode="resize"`` rescales the crop; ``mode="pad"`` zero-pads it around
    the centre.
    """
    h, w = image.shape[-2:]
    side_h = int(np.clip(round(scale * h), 1, h))
    side_w = int(np.clip(round(scale * w), 1, w))
    top = int(np.clip(top, 0, h - side_h))
    left = int(np.clip(left, 0, w - side_w))
    if side_h == h and side_w == w:
        return image.copy(), None if label is None else label.copy()
    if mode == "pad":
        out = np.zeros_like(image)
        ot, ol = (h - side_h) // 2, (w - side_w) // 2
        out[..., ot:ot + side_h, ol:ol + side_w] = image[..., top:top + side_h, left:left + side_w]
        lab = None
        if label is not None:
            lab = np.zeros_like(label)
            lab[..., ot:ot + side_h, ol:ol + side_w] = label[..., top:top + side_h, left:left + side_w]
        return out, lab
    r = top + (np.arange(h) + 0.5) * side_h / h - 0.5
    c = left + (np.arange(w) + 0.5) * side_w / w - 0.5
    rows, cols = np.meshgrid(r, c, indexing="ij")
    return warp_pair(image, label, rows, cols)


def displacement_field(shape, alpha, sigma, rng):
    """Gaussian-smoothed uniform noise, scaled by ``alpha`` (rows, cols)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    dy = gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="reflect") * alpha
    dx = gaussian_filter(rng.uniform(-1.0, 1.0, shape), sigma, mode="reflect") * alpha
    return dy, dx


def elastic_transform(image, label=None, alpha=34.0, sigma=4.0, rng=None):
    if alpha == 0:
        return image.copy(), None if label is None else label.copy()
    rng = np.random.default_rng() if rng is None else rng
    h, w = image.shape[-2:]
    dy, dx = displacement_field((h, w), alpha, sigma, rng)
    rows, cols = _identity_grid(h, w)
    return warp_pair(image, label, rows + dy, cols + dx)


def _grid_axis(n, steps, factors):
    coords = np.zeros(n, dtype=np.float64)
    cell = n // steps
    prev = 0.0
    for idx in range(steps + 1):
        start = idx * cell
        end = n if idx == steps else min(start + cell, n)
        if start >= end:
            continue
        cur = prev + (end - start) * factors[idx]
        coords[start:end] = np.linspace(prev, cur, end - start, endpoint=False)
        prev = cur
    return coords


def grid_distortion(image, label=None, x_factors=None, y_factors=None, steps=5):
    """Piecewise-linear stretch of a ``steps``-cell grid along each axis.

    Each factor scales one cell; all ones is the identity.
    """
    h, w = image.shape[-2:]
    xf = np.ones(steps + 1) if x_factors is None else np.asarray(x_factors, dtype=np.float64)
    yf = np.ones(steps + 1) if y_factors is None else np.asarray(y_factors, dtype=np.float64)
    if np.all(xf == 1.0) and np.all(yf == 1.0):
        return image.copy(), None if label is None else label.copy()
    cols = np.broadcast_to(_grid_axis(w, steps, xf)[None, :], (h, w))
    rows = np.broadcast_to(_grid_axis(h, steps, yf)[:, None], (h, w))
    return warp_pair(image, label, rows, cols)


def optical_distortion(image, label=None, k=0.0, shift_y=0.0, shift_x=0.0):
    """Radial lens distortion about a shifted centre; ``k = 0`` is identity."""
    if k == 0:
        return image.copy(), None if label is None else label.copy()
    h, w = image.shape[-2:]
    rows, cols = _identity_grid(h, w)
    cy = (h - 1) / 2 + shift_y
    cx = (w - 1) / 2 + shift_x
    v = (rows - cy) / h
    u = (cols - cx) / w
    scale = 1.0 + k * (u * u + v * v) * 4.0
    return warp_pair(image, label, cy + (rows - cy) * scale, cx + (cols - cx) * scale)


# --------------------------------------------------------------------------
# photometric transforms
# --------------------------------------------------------------------------


def brightness_contrast(image, label=None, brightness=0.0, contrast=0.0):
    out = np.clip(image * (1.0 + contrast) + brightness, 0.0, 1.0).astype(np.asarray(image).dtype)
    return out, label


def random_gamma(image, label=None, gamma=1.0):
    if gamma == 1.0:
        return image.copy(), label
    out = np.clip(np.power(np.clip(image, 0.0, 1.0), gamma), 0.0, 1.0).astype(np.asarray(image).dtype)
    return out, label


# --------------------------------------------------------------------------
# composition
# --------------------------------------------------------------------------


def _apply(name, image, label, cfg, rng):
    h, w = image.shape[-2:]
    if name == "random_sized_crop_pad":
        scale = rng.uniform(*cfg.crop_scale)
        side_h, side_w = int(round(scale * h)), int(round(scale * w))
        top = int(rng.integers(0, h - side_h + 1))
        left = int(rng.integers(0, w - side_w + 1))
        return random_sized_crop_pad(image, label, scale, top, left, cfg.crop_mode)
    if name == "vertical_flip":
        return vertical_flip(image, label)
    if name == "rotate90":
        return rotate90(image, label, int(rng.integers(1, 4)))
    if name == "elastic":
        return elastic_transform(image, label, cfg.elastic_alpha, cfg.elastic_sigma, rng)
    if name == "grid_distortion":
        lim = cfg.grid_limit
        xf = 1.0 + rng.uniform(-lim, lim, cfg.grid_steps + 1)
        yf = 1.0 + rng.uniform(-lim, lim, cfg.grid_steps + 1)
        return grid_distortion(image, label, xf, yf, cfg.grid_steps)
    if name == "optical_distortion":
        k = rng.uniform(-cfg.optical_limit, cfg.optical_limit)
        sy, sx = rng.uniform(-cfg.optical_shift, cfg.optical_shift, 2) * (h, w)
        return optical_distortion(image, label, k, sy, sx)
    if name == "brightness_contrast":
        b = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)
        c = rng.uniform(-cfg.contrast_limit, cfg.contrast_limit)
        return brightness_contrast(image, label, b, c)
    if name == "random_gamma":
        return random_gamma(image, label, rng.uniform(*cfg.gamma_range))
    raise KeyError(name)


def augment(image, label, config=None, rng=None, record=None):
    """Run the augmentation stack on one (image, label) pair.

    Returns ``(image, label, rng)``.  ``rng`` is a numpy Generator (or a
    seed); the same generator state always yields the same output.  Names
    of the transforms that fired are appended to ``record`` if given.
    """
    cfg = config or AugmentConfig()
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    image = np.asarray(image)
    if label is not None and np.asarray(label).shape[-2:] != image.shape[-2:]:
        raise ValueError("image and label must share spatial size")
    for name in TRANSFORM_ORDER:
        if rng.random() < cfg.probabilities[name]:
            image, label = _apply(name, image, label, cfg, rng)
            if record is not None:
                record.append(name)
    return image, label, rng


def worker_rng(seed, worker_index, epoch=0):
    """Independent generator for one data worker, derived from the master seed.

    ``seed`` may be an int or a sequence of ints.
    """
    base = [int(s) for s in np.atleast_1d(seed)]
    return np.random.default_rng(np.random.SeedSequence(base + [int(epoch), int(worker_index)]))
