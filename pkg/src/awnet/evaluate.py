"""FOV-masked segmentation metrics, ROC/AUC, paired t-test and ablation tables."""
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


class DegenerateSampleError(ValueError):
    pass


# --------------------------------------------------------------------------
# pixel metrics
# --------------------------------------------------------------------------


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise MetricError(f"shape mismatch: {sorted(shapes)}")


def confusion_counts(pred, truth, fov=None):
    """(TP, FP, TN, FN) over pixels where ``fov`` is nonzero."""
    if fov is None:
        fov = np.ones(np.shape(truth), dtype=np.uint8)
    _check_shapes(pred, truth, fov)
    return _kernels.confusion_counts(pred, truth, fov)


def f1_accuracy(counts):
    tp, fp, tn, fn = counts
    total = tp + fp + tn + fn
    denom = 2 * tp + fp + fn
    if denom == 0:
        warnings.warn("F1 undefined (no positive predictions or labels); reported as 0", RuntimeWarning)
        f1 = 0.0
    else:
        f1 = 2 * tp / denom
    acc = (tp + tn) / total if total else 0.0
    return f1, acc


def _fov_scores(prob, truth, fov):
    prob = np.asarray(prob, dtype=np.float64)
    truth = np.asarray(truth)
    if fov is None:
        return prob.ravel(), (truth.ravel() != 0)
    fov = np.asarray(fov) != 0
    return prob[fov], truth[fov] != 0


def roc_curve(scores, labels, bins=None):
    """ROC points (fpr, tpr) over every distinct score, highest first.

    ``bins`` switches to an approximate histogram mode with that many
    equal-width score bins on [0, 1].
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() != 0
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC undefined: ground truth contains a single class")
    if bins is not None:
        idx = np.clip((scores * bins).astype(np.int64), 0, bins - 1)
        pos = np.bincount(idx[labels], minlength=bins)[::-1]
        neg = np.bincount(idx[~labels], minlength=bins)[::-1]
        tps, fps = np.cumsum(pos), np.cumsum(neg)
        keep = np.r_[True, (pos + neg)[1:] > 0]
        tps, fps = tps[keep], fps[keep]
    else:
        order = np.argsort(-scores, kind="mergesort")
        s = scores[order]
        y = labels[order]
        last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
        tps = np.cumsum(y)[last]
        fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr


def auc_trapezoid(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(prob, truth, fov=None, bins=None):
    """(fpr, tpr, auc) for one map or lists of maps pooled over FOV pixels."""
    if isinstance(prob, (list, tuple)):
        fovs = fov if fov is not None else [None] * len(prob)
        parts = [_fov_scores(p, t, f) for p, t, f in zip(prob, truth, fovs)]
        scores = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        _check_shapes(prob, truth, *(() if fov is None else (fov,)))
        scores, labels = _fov_scores(prob, truth, fov)
    fpr, tpr = roc_curve(scores, labels, bins)
    return fpr, tpr, auc_trapezoid(fpr, tpr)


def best_f1_threshold(scores, labels):
    """Threshold on ``scores`` maximising F1 (pixels with score >= t are positive)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() != 0
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    fn = labels.sum() - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    k = int(np.argmax(f1))
    return float(s[last[k]]), float(f1[k])


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class ImageMetrics:
    id: str
    f1: float
    accuracy: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class EvalReport:
    threshold: float
    f1: float
    accuracy: float
    auc: float
    counts: tuple
    per_image: list = field(default_factory=list)
    roc: tuple = None  # (fpr, tpr) arrays
    tuned_threshold: float = None
    tuned_f1: float = None

    def summary(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("roc", "per_image")}
        d["counts"] = dict(zip(("tp", "fp", "tn", "fn"), self.counts))
        d["per_image"] = [asdict(m) for m in self.per_image]
        return d

    def to_json(self):
        return json.dumps(self.summary(), indent=2)

    def table(self):
        lines = [f"{'image':<14} {'F1':>7} {'ACC':>7} {'AUC':>7}"]
        for m in self.per_image:
            lines.append(f"{m.id:<14} {m.f1:7.4f} {m.accuracy:7.4f} {m.auc:7.4f}")
        lines.append(f"{'pooled':<14} {self.f1:7.4f} {self.accuracy:7.4f} {self.auc:7.4f}")
        if self.tuned_threshold is not None:
            lines.append(f"tuned threshold {self.tuned_threshold:.4f}: F1 {self.tuned_f1:.4f}")
        return "\n".join(lines)


def evaluate_maps(probs, truths, fovs, ids=None, threshold=0.5, roc_bins=None):
    """Per-image and pooled metrics for lists of probability maps.

    F1/ACC come from the pooled confusion counts at ``threshold``; AUC is
    computed over pooled FOV pixels.  The F1-optimal threshold on the same
    pixels is reported alongside.
    """
    ids = ids or [str(i) for i in range(len(probs))]
    per_image = []
    total = np.zeros(4, dtype=np.int64)
    for sid, p, t, f in zip(ids, probs, truths, fovs):
        _check_shapes(p, t, f)
        pred = (np.asarray(p) >= threshold).astype(np.uint8)
        c = confusion_counts(pred, t, f)
        total += c
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            f1, acc = f1_accuracy(c)
        try:
            auc = roc_auc(p, t, f, roc_bins)[2]
        except MetricError:
            auc = float("nan")
        per_image.append(ImageMetrics(sid, f1, acc, auc, *c))
    counts = tuple(int(v) for v in total)
    f1, acc = f1_accuracy(counts)
    fpr, tpr, auc = roc_auc(list(probs), list(truths), list(fovs), roc_bins)
    scores = np.concatenate([_fov_scores(p, t, f)[0] for p, t, f in zip(probs, truths, fovs)])
    labels = np.concatenate([_fov_scores(p, t, f)[1] for p, t, f in zip(probs, truths, fovs)])
    tuned_t, tuned_f1 = best_f1_threshold(scores, labels)
    return EvalReport(threshold, f1, acc, auc, counts, per_image, (fpr, tpr), tuned_t, tuned_f1)


# --------------------------------------------------------------------------
# significance
# --------------------------------------------------------------------------


def _betacf(a, b, x, max_iter=500, tol=1e-15):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def t_sf(t, dof):
    """Upper tail P(T > t) of Student's t with ``dof`` degrees of freedom."""
    tail = 0.5 * betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    return tail if t >= 0 else 1.0 - tail


@dataclass
class SignificanceResult:
    sample_a: list
    sample_b: list
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    alpha: float
    reject: bool


def paired_t_test(a, b, alpha=0.005, tail="greater"):
    """Paired t-test on d = b - a; one-tailed (H1: mean(d) > 0) by default."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = b - a
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateSampleError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    dof = n - 1
    if tail == "greater":
        p = t_sf(t, dof)
    elif tail == "less":
        p = t_sf(-t, dof)
    elif tail == "two-sided":
        p = min(1.0, 2.0 * t_sf(abs(t), dof))
    else:
        raise ValueError(f"unknown tail {tail!r}")
    return SignificanceResult(a.tolist(), b.tolist(), t, dof, p, alpha, bool(p < alpha))


# --------------------------------------------------------------------------
# ablation table
# --------------------------------------------------------------------------

# (resblock, augmentation, attention) per row, backbone first
ABLATION_ROWS = (
    ("plain", False, "none"),
    ("shared", False, "none"),
    ("shared", True, "none"),
    ("shared", True, "type1"),
    ("shared", True, "type2"),
)
AB_LABEL = {"none": "-", "type1": "Type-1", "type2": "Type-2"}


def ablation_key(resblock, augmentation, attention):
    return f"resblock={resblock},aug={'on' if augmentation else 'off'},ab={attention}"


def ablation_report(results):
    """Render the five-row ablation table.

    ``results`` maps :func:`ablation_key` strings (or (resblock, aug, ab)
    tuples) to dicts with ``f1`` and ``auc``.  Missing rows are marked
    absent; an empty mapping gives an empty table.
    """
    norm = {}
    for k, v in (results or {}).items():
        norm[ablation_key(*k) if isinstance(k, tuple) else k] = v
    rows = []
    if not norm:
        return {"rows": rows, "text": ""}
    lines = [f"{'ResBlock':<9} {'Aug':<4} {'AB':<6} {'F1':>7} {'AUC':>7}"]
    for resblock, aug, ab in ABLATION_ROWS:
        key = ablation_key(resblock, aug, ab)
        res = norm.get(key)
        f1 = None if res is None else res.get("f1")
        auc = None if res is None else res.get("auc")
        rows.append({"resblock": resblock != "plain", "augmentation": aug, "ab": ab,
                     "f1": f1, "auc": auc, "present": res is not None})
        cell = lambda v: f"{v:7.4f}" if v is not None else f"{'absent':>7}"  # noqa: E731
        lines.append(f"{'yes' if resblock != 'plain' else 'no':<9} {'yes' if aug else 'no':<4} "
                     f"{AB_LABEL[ab]:<6} {cell(f1)} {cell(auc)}")
    return {"rows": rows, "text": "\n".join(lines)}
