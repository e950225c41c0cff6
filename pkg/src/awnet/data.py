"""DRIVE / CHASE-DB1 ingestion, preprocessing, FOV extraction and patch grids.

Dataset layout (frozen)::

    <root>/<DRIVE|CHASE>/<train|test>/images/<id>.<tif|png|jpg|...>
    <root>/<DRIVE|CHASE>/<train|test>/labels/<id>.<gif|png|tif|...>
    <root>/<DRIVE|CHASE>/<train|test>/masks/<id>.<gif|png|...>      (DRIVE only)

CHASE FOV masks are computed with :func:`extract_fov_mask` when ``masks/``
is absent.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu

from . import _kernels

log = logging.getLogger(__name__)

PATCH_SIZE = 48
PREPROCESS_VERSION = "gray-zscore-clahe8x8c2-gamma1.2/v1"

# (height, width) of the raw rasters; the usual "565 x 584" is width x height
RASTER_SHAPE = {"DRIVE": (584, 565), "CHASE": (960, 999)}
IMAGE_EXTS = (".tif", ".tiff", ".png", ".jpg", ".jpeg", ".bmp", ".ppm")
MASK_EXTS = (".gif", ".png", ".tif", ".tiff", ".bmp", ".jpg")

DATASET_IDS = {
    ("DRIVE", "train"): [f"{i:02d}" for i in range(21, 41)],
    ("DRIVE", "test"): [f"{i:02d}" for i in range(1, 21)],
    ("CHASE", "train"): [f"Image_{i:02d}{s}" for i in range(1, 11) for s in "LR"],
    ("CHASE", "test"): [f"Image_{i:02d}{s}" for i in range(11, 15) for s in "LR"],
}


class DataIngestionError(FileNotFoundError):
    pass


class DataValidationError(ValueError):
    pass


class FOVExtractionError(ValueError):
    pass


@dataclass
class FundusSample:
    id: str
    image: np.ndarray  # H x W x 3 uint8
    vessel_mask: np.ndarray  # H x W uint8 {0, 1}
    fov_mask: np.ndarray  # H x W uint8 {0, 1}
    dataset: str = "DRIVE"

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass
class PatchSet:
    """Patches cut from one or more images with their top-left origins.

    ``patches`` is N x C x size x size, ``labels`` N x 1 x size x size (or
    None), ``origins`` N x 2 (row, col) in padded coordinates, and
    ``sources`` the image id of each patch.
    """

    patches: np.ndarray
    origins: np.ndarray
    sources: np.ndarray
    labels: np.ndarray = None
    padded_shapes: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.origins)

    @property
    def size(self):
        return self.patches.shape[-1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return PatchSet(
            patches=self.patches[idx],
            origins=self.origins[idx],
            sources=self.sources[idx],
            labels=None if self.labels is None else self.labels[idx],
            padded_shapes=dict(self.padded_shapes),
        )

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise ValueError("nothing to concatenate")
        labels = None
        if all(s.labels is not None for s in sets):
            labels = np.concatenate([s.labels for s in sets])
        shapes = {}
        for s in sets:
            shapes.update(s.padded_shapes)
        return cls(
            patches=np.concatenate([s.patches for s in sets]),
            origins=np.concatenate([s.origins for s in sets]),
            sources=np.concatenate([s.sources for s in sets]),
            labels=labels,
            padded_shapes=shapes,
        )


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def canonical_name(name):
    key = str(name).upper().replace("-", "").replace("_", "")
    if key == "DRIVE":
        return "DRIVE"
    if key in ("CHASE", "CHASEDB1", "CHASEDB"):
        return "CHASE"
    raise ValueError(f"unknown dataset {name!r}; expected DRIVE or CHASE")


def dataset_dir(root, name, split):
    name = canonical_name(name)
    root = Path(root)
    for cand in (name, name.lower(), "CHASEDB1" if name == "CHASE" else name):
        if (root / cand).is_dir():
            return root / cand / split
    return root / name / split


def _find(directory, stem, exts):
    for ext in exts:
        for cand in (ext, ext.upper()):
            p = directory / f"{stem}{cand}"
            if p.exists():
                return p
    return None


def _read_binary(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_dataset(root, name, split, ids=None, check_shape=True):
    """Load every sample of ``split`` ("train" or "test") as FundusSample.

    ``ids`` restricts loading to a subset; by default the canonical id list
    of the dataset is used, so a missing file is reported by name.
    """
    name = canonical_name(name)
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = dataset_dir(root, name, split)
    ids = DATASET_IDS[(name, split)] if ids is None else list(ids)
    samples = []
    for sid in ids:
        img_path = _find(base / "images", sid, IMAGE_EXTS)
        if img_path is None:
            raise DataIngestionError(f"missing image for {name}/{split} id {sid}: {base / 'images' / sid}.*")
        lbl_path = _find(base / "labels", sid, MASK_EXTS)
        if lbl_path is None:
            raise DataIngestionError(f"missing label for {name}/{split} id {sid}: {base / 'labels' / sid}.*")
        image = np.asarray(Image.open(img_path).convert("RGB"))
        label = _read_binary(lbl_path)
        mask_path = _find(base / "masks", sid, MASK_EXTS) if (base / "masks").is_dir() else None
        if mask_path is not None:
            fov = _read_binary(mask_path)
        elif name == "DRIVE":
            raise DataIngestionError(f"missing FOV mask for DRIVE/{split} id {sid}: {base / 'masks' / sid}.*")
        else:
            fov = extract_fov_mask(image)
        if check_shape and image.shape[:2] != RASTER_SHAPE[name]:
            raise DataValidationError(
                f"{img_path}: raster is {image.shape[0]}x{image.shape[1]} (HxW), "
                f"expected {RASTER_SHAPE[name][0]}x{RASTER_SHAPE[name][1]} for {name}")
        if label.shape != image.shape[:2] or fov.shape != image.shape[:2]:
            raise DataValidationError(f"{sid}: image, label and FOV mask sizes differ")
        samples.append(FundusSample(sid, image, label, fov, name))
    return samples


def write_sample(base, sample):
    """Write ``sample`` into the documented layout under ``base`` (a split dir)."""
    base = Path(base)
    for sub in ("images", "labels", "masks"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    Image.fromarray(sample.image).save(base / "images" / f"{sample.id}.png")
    Image.fromarray(sample.vessel_mask * 255).save(base / "labels" / f"{sample.id}.png")
    if sample.dataset == "DRIVE":
        Image.fromarray(sample.fov_mask * 255).save(base / "masks" / f"{sample.id}.png")


# --------------------------------------------------------------------------
# FOV and preprocessing
# --------------------------------------------------------------------------


def to_gray(image):
    image = np.asarray(image)
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def extract_fov_mask(image, dark_threshold=20.0, closing_radius=10):
    """Binary mask of the illuminated retina.

    Otsu threshold on grayscale, largest connected component, disk closing
    and hole filling.
    """
    gray = to_gray(image)
    if gray.max() < dark_threshold:
        raise FOVExtractionError(f"image too dark for FOV extraction (max intensity {gray.max():.1f})")
    if gray.min() >= dark_threshold:
        return np.ones(gray.shape, dtype=np.uint8)
    thr = threshold_otsu(gray)
    mask = gray > thr
    labels, n = ndimage.label(mask)
    if n == 0:
        raise FOVExtractionError("no foreground region found")
    sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    mask = labels == (1 + int(np.argmax(sizes)))
    r = closing_radius
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (yy ** 2 + xx ** 2) <= r * r
    padded = np.pad(mask, r + 1)
    closed = ndimage.binary_closing(padded, structure=disk)[r + 1:-(r + 1), r + 1:-(r + 1)]
    closed = ndimage.binary_fill_holes(closed)
    frac = closed.mean()
    if not 0.4 <= frac <= 0.9 and frac < 1.0:
        log.warning("FOV mask covers %.1f%% of the frame, outside the expected 40-90%%", 100 * frac)
    return closed.astype(np.uint8)


def dataset_statistics(samples):
    """Mean and standard deviation of grayscale intensity over ``samples``."""
    grays = [to_gray(s.image) for s in samples]
    total = sum(g.size for g in grays)
    mean = sum(g.sum() for g in grays) / total
    var = sum(((g - mean) ** 2).sum() for g in grays) / total
    return float(mean), float(math.sqrt(var))


def preprocess(sample, stats=None, gamma=1.2, clahe_clip=2.0, clahe_tiles=8):
    """Grayscale, z-score, rescale, CLAHE and gamma; returns float32 in [0, 1].

    ``stats`` is the (mean, std) pair from :func:`dataset_statistics`; when
    omitted the sample's own statistics are used.
    """
    image = sample.image if isinstance(sample, FundusSample) else sample
    gray = to_gray(image)
    mean, std = stats if stats is not None else (gray.mean(), gray.std())
    z = (gray - mean) / (std if std > 0 else 1.0)
    lo, hi = z.min(), z.max()
    scaled = (z - lo) / (hi - lo) * 255.0 if hi > lo else np.zeros_like(z)
    u8 = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    clahe = cv2.createCLAHE(clipLimit=clahe_clip, tileGridSize=(clahe_tiles, clahe_tiles))
    eq = clahe.apply(u8)
    lut = np.array([((i / 255.0) ** (1.0 / gamma)) * 255.0 for i in range(256)])
    lut = np.clip(np.rint(lut), 0, 255).astype(np.uint8)
    out = cv2.LUT(eq, lut).astype(np.float32) / 255.0
    return out


def preprocess_dataset(samples, stats=None):
    stats = stats if stats is not None else dataset_statistics(samples)
    return [preprocess(s, stats) for s in samples], stats


# --------------------------------------------------------------------------
# patch grid
# --------------------------------------------------------------------------


def grid_pad(dim, size=PATCH_SIZE, stride=5):
    """Padding needed so that (dim + pad - size) is a multiple of stride."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if dim <= size:
        return size - dim
    return (-(dim - size)) % stride


def pad_to_grid(array, size=PATCH_SIZE, stride=5, mode="reflect"):
    """Pad the last two axes at the bottom/right to fit the patch grid."""
    ph = grid_pad(array.shape[-2], size, stride)
    pw = grid_pad(array.shape[-1], size, stride)
    width = [(0, 0)] * (array.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(array, width, mode=mode)


def patch_origins(height, width, size=PATCH_SIZE, stride=5):
    """Row-major (row, col) origins covering a padded height x width raster."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if height < size or width < size:
        raise ValueError(f"raster {height}x{width} smaller than patch size {size}")
    rows = np.arange(0, height - size + 1, stride)
    cols = np.arange(0, width - size + 1, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int64)


def grid_count(height, width, size=PATCH_SIZE, stride=5):
    rows = math.ceil(max(height - size, 0) / stride) + 1
    cols = math.ceil(max(width - size, 0) / stride) + 1
    return rows * cols


def extract_patches(image, label=None, size=PATCH_SIZE, stride=5, pad_mode="reflect", image_id=""):
    """Cut the overlapping patch grid from ``image`` (H x W or C x H x W)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    padded = pad_to_grid(img, size, stride, pad_mode)
    origins = patch_origins(padded.shape[1], padded.shape[2], size, stride)
    patches = _kernels.gather_patches(padded, origins, size)
    labels = None
    if label is not None:
        lbl = pad_to_grid(np.asarray(label, dtype=np.uint8)[None], size, stride, pad_mode)
        labels = _kernels.gather_patches(lbl, origins, size)
    return PatchSet(
        patches=patches,
        origins=origins,
        sources=np.array([image_id] * len(origins), dtype=object),
        labels=labels,
        padded_shapes={image_id: padded.shape[1:]},
    )


def stitch_patches(values, origins, shape):
    """Average overlapping (N x s x s) values back onto a ``shape`` raster.

    Returns (mean, count); pixels never covered have mean 0 and count 0.
    """
    values = np.asarray(values)
    if values.ndim == 4:
        values = values[:, 0]
    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int64)
    _kernels.accumulate_patches(total, count, values.astype(np.float64), origins)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return mean, count


def split_validation(patchset, fraction=0.10, seed=0, by="patch"):
    """Random disjoint (train, val) split of a PatchSet.

    ``by="image"`` holds out whole source images instead of patches.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    n = len(patchset)
    if by == "patch":
        perm = rng.permutation(n)
        n_val = int(round(n * fraction))
        val_idx = np.sort(perm[:n_val])
        train_idx = np.sort(perm[n_val:])
    elif by == "image":
        ids = sorted(set(patchset.sources.tolist()))
        n_val = max(1, int(round(len(ids) * fraction)))
        held = set(rng.permutation(ids)[:n_val].tolist())
        is_val = np.array([s in held for s in patchset.sources])
        val_idx = np.flatnonzero(is_val)
        train_idx = np.flatnonzero(~is_val)
    else:
        raise ValueError(f"by must be 'patch' or 'image', got {by!r}")
    return patchset.subset(train_idx), patchset.subset(val_idx)


def file_digest(paths):
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(p.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()
