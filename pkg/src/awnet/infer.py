"""Whole-image prediction by averaging overlapping patch outputs."""
from dataclasses import dataclass

import numpy as np
import torch

from . import _kernels
from .data import PATCH_SIZE, FundusSample, pad_to_grid, patch_origins, preprocess

# The model always sees blocks of EVAL_BLOCK patches aligned to the global
# patch order; CPU conv kernels are not batch-shape invariant at the ulp level.
EVAL_BLOCK = 64


@dataclass
class ProbabilityMap:
    values: np.ndarray  # H x W float in [0, 1]
    fov_mask: np.ndarray  # H x W {0, 1}
    source_id: str = ""
    coverage: np.ndarray = None  # patches covering each pixel (padded extent)


def overlap_fraction(size=PATCH_SIZE, stride=5):
    """Fraction of a patch shared with its neighbour one stride away."""
    return max(size - stride, 0) / size


def _step(batch_size):
    return max(EVAL_BLOCK, -(-int(batch_size) // EVAL_BLOCK) * EVAL_BLOCK)


def _run_blocks(model, xb, dtype):
    outs = [model(torch.from_numpy(xb[i:i + EVAL_BLOCK]).to(dtype))[:, 0].double().numpy()
            for i in range(0, len(xb), EVAL_BLOCK)]
    return np.concatenate(outs)


def predict_patches(model, patches, batch_size=1024):
    """Model outputs (N x size x size) for an N x C x size x size array."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    outs = []
    step = _step(batch_size)
    with torch.no_grad():
        for start in range(0, len(patches), step):
            outs.append(_run_blocks(model, np.ascontiguousarray(patches[start:start + step]), dtype))
    model.train(was_training)
    return np.concatenate(outs) if outs else np.zeros((0,) + patches.shape[-2:])


def predict_array(model, image, stride=5, size=PATCH_SIZE, batch_size=1024, return_coverage=False):
    """Average patch predictions over a preprocessed H x W (or C x H x W) image.

    Patches are scored in contiguous batches and summed into a float64
    accumulation plane in grid order, then divided by the coverage count
    and cropped back to the input extent.  ``batch_size`` only affects
    throughput: it is rounded up to a multiple of EVAL_BLOCK and the result
    is bitwise identical for every value.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    h, w = img.shape[-2:]
    padded = pad_to_grid(img, size, stride, "reflect")
    origins = patch_origins(padded.shape[1], padded.shape[2], size, stride)
    total = np.zeros(padded.shape[1:], dtype=np.float64)
    count = np.zeros(padded.shape[1:], dtype=np.int64)
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    step = _step(batch_size)
    with torch.no_grad():
        for start in range(0, len(origins), step):
            org = origins[start:start + step]
            xb = _kernels.gather_patches(padded, org, size)
            _kernels.accumulate_patches(total, count, _run_blocks(model, xb, dtype), org)
    model.train(was_training)
    mean = total / count
    if return_coverage:
        return mean[:h, :w], count
    return mean[:h, :w]


def predict_image(model, sample, stride=5, batch_size=1024, stats=None, size=PATCH_SIZE):
    """ProbabilityMap for a FundusSample (preprocessed here) or a ready image.

    ``stats`` are the dataset (mean, std) used at training time; they are
    ignored when ``sample`` is already a preprocessed array.
    """
    if isinstance(sample, FundusSample):
        image = preprocess(sample, stats)
        fov, sid = sample.fov_mask, sample.id
    else:
        image = np.asarray(sample, dtype=np.float32)
        fov = np.ones(image.shape[-2:], dtype=np.uint8)
        sid = ""
    values, coverage = predict_array(model, image, stride, size, batch_size, return_coverage=True)
    return ProbabilityMap(values, fov, sid, coverage)


def binarize(prob_map, threshold=0.5, fov=None):
    """1 where probability >= threshold inside the FOV, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(prob_map, ProbabilityMap):
        values, fov = prob_map.values, prob_map.fov_mask if fov is None else fov
    else:
        values = np.asarray(prob_map)
    mask = values >= threshold
    if fov is not None:
        mask &= np.asarray(fov) != 0
    return mask.astype(np.uint8)
