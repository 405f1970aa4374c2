"""Segmentation metrics: confusion-based ratios, ROC AUC and area under the PR curve."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_NAMES = ("auc", "spec", "sens", "acc", "dice", "jaccard", "auprc")


def _ratio(num, den):
    # empty denominators mean there was nothing to get wrong
    return float(num) / float(den) if den else 1.0


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def sens(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def spec(self):
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def acc(self):
        if self.total == 0:
            raise ValueError("no pixels to evaluate")
        return (self.tp + self.tn) / self.total

    @property
    def dice(self):
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def jaccard(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    def __add__(self, other):
        return Confusion(self.tp + other.tp, self.tn + other.tn,
                         self.fp + other.fp, self.fn + other.fn)


def confusion(probs, mask, threshold=0.5, fov=None):
    probs = np.asarray(probs).ravel()
    mask = np.asarray(mask).ravel() > 0.5
    if probs.shape != mask.shape:
        raise ValueError(f"prediction has {probs.size} pixels, mask has {mask.size}")
    if fov is not None:
        keep = np.asarray(fov).ravel() > 0.5
        probs, mask = probs[keep], mask[keep]
    if probs.size == 0:
        raise ValueError("empty image: no pixels to evaluate")
    pred = probs >= threshold
    tp = int(np.count_nonzero(pred & mask))
    fp = int(np.count_nonzero(pred & ~mask))
    fn = int(np.count_nonzero(~pred & mask))
    tn = int(probs.size - tp - fp - fn)
    return Confusion(tp, tn, fp, fn)


def confusion_metrics(probs, mask, threshold=0.5, fov=None):
    """Sens, Spec, Acc, Dice and Jaccard at ``threshold``, plus the raw counts."""
    c = confusion(probs, mask, threshold, fov)
    return {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn, "sens": c.sens,
            "spec": c.spec, "acc": c.acc, "dice": c.dice, "jaccard": c.jaccard}


def _sorted_counts(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel() > 0.5
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    # last index of every run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[ends].astype(np.float64)
    fps = (ends + 1 - tps).astype(np.float64)
    return tps, fps, n_pos, n_neg, s[ends]


def roc_curve(scores, labels):
    """``(fpr, tpr, thresholds)`` over every distinct score, starting at (0, 0)."""
    tps, fps, n_pos, n_neg, thr = _sorted_counts(scores, labels)
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return fpr, tpr, np.r_[np.inf, thr]


def auc_roc(scores, labels):
    """Trapezoidal area under the ROC curve; tied scores count one half."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def pr_curve(scores, labels):
    """``(precision, recall, thresholds)`` at every distinct score, highest first."""
    tps, fps, n_pos, _, thr = _sorted_counts(scores, labels)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    return precision, recall, thr


def auprc(scores, labels):
    """Step-wise area under the precision/recall curve (average precision).

    ``sum_n (R_n - R_{n-1}) * P_n`` over distinct thresholds, the same
    convention as scikit-learn's ``average_precision_score``.
    """
    precision, recall, _ = pr_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _downsample_curve(x, y, n=200):
    if len(x) <= n:
        return [float(v) for v in x], [float(v) for v in y]
    idx = np.unique(np.linspace(0, len(x) - 1, n).round().astype(int))
    return [float(v) for v in x[idx]], [float(v) for v in y[idx]]


@dataclass
class MetricsReport:
    """Pooled metrics over a set of images plus per-image values for boxplots."""

    tp: int
    tn: int
    fp: int
    fn: int
    sens: float
    spec: float
    acc: float
    dice: float
    jaccard: float
    auc: float
    auprc: float
    per_image: dict = field(default_factory=dict)
    image_ids: list = field(default_factory=list)
    roc: dict = field(default_factory=dict)
    pr: dict = field(default_factory=dict)

    def summary(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self):
        return asdict(self)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, default=float)


def evaluate(probs, masks, ids=None, threshold=0.5, fovs=None):
    """Score a list of probability maps against their masks.

    Counts and curves pool every pixel; ``per_image`` holds one value per
    image for each metric (``nan`` AUC/AUPRC for single-class images).
    """
    if len(probs) == 0:
        raise ValueError("no images to evaluate")
    if len(probs) != len(masks):
        raise ValueError("need one mask per prediction")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(probs))]
    fovs = fovs if fovs is not None else [None] * len(probs)
    per_image = {name: [] for name in METRIC_NAMES}
    total = Confusion(0, 0, 0, 0)
    all_scores, all_labels = [], []
    for p, m, f in zip(probs, masks, fovs):
        p = np.asarray(p, dtype=np.float64).ravel()
        m = np.asarray(m).ravel() > 0.5
        if f is not None:
            keep = np.asarray(f).ravel() > 0.5
            p, m = p[keep], m[keep]
        c = confusion(p, m, threshold)
        total = total + c
        for name in ("sens", "spec", "acc", "dice", "jaccard"):
            per_image[name].append(getattr(c, name))
        try:
            per_image["auc"].append(auc_roc(p, m))
            per_image["auprc"].append(auprc(p, m))
        except ValueError:
            per_image["auc"].append(float("nan"))
            per_image["auprc"].append(float("nan"))
        all_scores.append(p)
        all_labels.append(m)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    try:
        auc = auc_roc(scores, labels)
        ap = auprc(scores, labels)
        fpr, tpr, _ = roc_curve(scores, labels)
        prec, rec, _ = pr_curve(scores, labels)
        roc = dict(zip(("fpr", "tpr"), _downsample_curve(fpr, tpr)))
        pr = dict(zip(("recall", "precision"), _downsample_curve(rec, prec)))
    except ValueError:
        auc = ap = float("nan")
        roc, pr = {}, {}
    return MetricsReport(
        tp=total.tp, tn=total.tn, fp=total.fp, fn=total.fn,
        sens=total.sens, spec=total.spec, acc=total.acc,
        dice=total.dice, jaccard=total.jaccard, auc=auc, auprc=ap,
        per_image=per_image, image_ids=ids, roc=roc, pr=pr,
    )
