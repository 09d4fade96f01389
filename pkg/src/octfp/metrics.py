"""Segmentation and verification-score metrics.

Two score conventions live here. Verification metrics (EER, FMR100, GMR@FMR)
follow "higher score = better match", deciding match at score >= threshold.
The attack-detection metrics live in :mod:`octfp.pad` and use the opposite
orientation. All rates are percentages in [0, 100].
"""

from __future__ import annotations

import numpy as np

from .core import N_CLASSES


def confusion_matrix(pred, true, n_classes: int = N_CLASSES) -> np.ndarray:
    """Count matrix with entry (i, j) = pixels of true class i predicted j."""
    p = np.ravel(np.asarray(pred)).astype(np.int64)
    t = np.ravel(np.asarray(true)).astype(np.int64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs true {t.shape}")
    if p.size == 0:
        raise ValueError("empty inputs")
    for name, a in (("pred", p), ("true", t)):
        if a.min() < 0 or a.max() >= n_classes:
            raise ValueError(f"{name} labels outside 0..{n_classes - 1}")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes) \
        .reshape(n_classes, n_classes)


def miou(cm: np.ndarray) -> float:
    """Mean per-class intersection over union. Classes absent from both
    prediction and truth (zero union) are left out of the mean."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValueError("confusion matrix has no populated class")
    return float((tp[present] / union[present]).mean())


def pixel_accuracy(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def _check_scores(name, scores) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"empty {name} score list")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite {name} scores")
    return a


def roc_points(genuine, impostor):
    """Operating points (threshold, FMR%, FNMR%) over every distinct score
    plus a sentinel above the maximum, thresholds ascending.

    FMR(t) is the impostor fraction at score >= t, FNMR(t) the genuine
    fraction below t; FMR falls and FNMR rises with t.
    """
    g = _check_scores("genuine", genuine)
    i = _check_scores("impostor", impostor)
    thresholds = np.unique(np.concatenate([g, i]))
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)
    # count via sorted positions instead of an O(n^2) comparison sweep
    fmr = (i.size - np.searchsorted(np.sort(i), thresholds, side="left")) \
        / i.size * 100.0
    fnmr = np.searchsorted(np.sort(g), thresholds, side="left") / g.size * 100.0
    return thresholds, fmr, fnmr


def eer(genuine, impostor) -> float:
    """Rate where FMR and FNMR cross, linearly interpolated between the
    bracketing thresholds."""
    _, fmr, fnmr = roc_points(genuine, impostor)
    d = fmr - fnmr  # monotone non-increasing, +100 at the low end
    for k in range(d.size):
        if d[k] == 0.0:
            return float((fmr[k] + fnmr[k]) / 2.0)
        if k + 1 < d.size and d[k] > 0.0 > d[k + 1]:
            a = d[k] / (d[k] - d[k + 1])
            f = fmr[k] + a * (fmr[k + 1] - fmr[k])
            n = fnmr[k] + a * (fnmr[k + 1] - fnmr[k])
            return float((f + n) / 2.0)
    # d starts at +100 and the sentinel forces it to -100, so a crossing
    # always exists; reaching here means every d shares one sign
    raise AssertionError("no FMR/FNMR crossing found")


def fnmr_at_fmr(genuine, impostor, fmr_target: float) -> float:
    """FNMR at the first ascending threshold with FMR <= target, which is
    the minimal FNMR subject to that constraint."""
    _, fmr, fnmr = roc_points(genuine, impostor)
    idx = np.nonzero(fmr <= fmr_target)[0]
    return float(fnmr[idx[0]])


def fmr100(genuine, impostor) -> float:
    return fnmr_at_fmr(genuine, impostor, 1.0)


def gmr_at_fmr(genuine, impostor, fmr_target: float = 5.0) -> float:
    return 100.0 - fnmr_at_fmr(genuine, impostor, fmr_target)
