"""Per-frame average precision (AP/mAP) and calibrated AP (cAP/mcAP).

Frames are ranked by descending score for one class; ties go to the lower
frame index. Class 0 is background and never enters the means. A class with
no positive frames has no defined AP and is listed in ``skipped_classes``.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, UsageError


class UndefinedAP(UsageError):
    """Raised when a class has no positive frames."""


class EmptyEvaluation(UsageError):
    """Raised when every action class was skipped."""


@dataclass
class EvalSet:
    probs: np.ndarray  # (N, K+1)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 2 or self.labels.shape != (self.probs.shape[0],):
            raise ShapeError(f"probs {self.probs.shape} and labels {self.labels.shape} are inconsistent")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.probs.shape[1]):
            raise UsageError(f"labels must lie in [0, {self.probs.shape[1] - 1}]")

    @property
    def K(self):
        return self.probs.shape[1] - 1


@dataclass
class ApResult:
    per_class_ap: dict = field(default_factory=dict)  # class index -> value
    mean: float = float("nan")
    skipped_classes: list = field(default_factory=list)


def rank_frames(evalset, k):
    """Frame indices by descending score for class ``k``; ties by ascending index."""
    if not 0 <= k <= evalset.K:
        raise UsageError(f"class {k} out of range [0, {evalset.K}]")
    return np.argsort(-evalset.probs[:, k], kind="stable")


def _calibrated_precision_sum(flags, w):
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise UndefinedAP("no positive frames")
    tp = np.cumsum(flags, dtype=np.float64)
    fp = np.cumsum(~flags, dtype=np.float64)
    prec = tp / (tp + fp / w)
    return float(prec[flags].sum() / n_pos)


def average_precision(flags):
    """AP of a ranked list of positivity flags (best-ranked first)."""
    return _calibrated_precision_sum(flags, 1.0)


def calibrated_average_precision(flags, w):
    """cAP of a ranked list; false positives are down-weighted by ``w``."""
    if not w > 0:
        raise UsageError(f"calibration weight must be positive, got {w}")
    return _calibrated_precision_sum(flags, float(w))


def _mean_over_classes(evalset, score_fn):
    if len(evalset.labels) < 1:
        raise UsageError("evaluation set is empty")
    result = ApResult()
    for k in range(1, evalset.K + 1):
        positive = evalset.labels == k
        if not positive.any():
            result.skipped_classes.append(k)
            continue
        flags = positive[rank_frames(evalset, k)]
        result.per_class_ap[k] = score_fn(flags)
    if not result.per_class_ap:
        raise EmptyEvaluation("no action class has a positive frame")
    result.mean = float(np.mean(list(result.per_class_ap.values())))
    return result


def mean_average_precision(evalset):
    return _mean_over_classes(evalset, average_precision)


def calibration_weight(flags):
    """Negatives per positive; this weight makes cAP behave as on a balanced class."""
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    if n_pos == 0:
        raise UndefinedAP("no positive frames")
    return (flags.size - n_pos) / n_pos


def mean_calibrated_ap(evalset):
    """mcAP; classes with only positive frames get ``w = 0`` and fall back to AP."""

    def score(flags):
        w = calibration_weight(flags)
        # With no negatives FP is zero at every cut-off, so any w gives AP.
        return calibrated_average_precision(flags, w) if w > 0 else average_precision(flags)

    return _mean_over_classes(evalset, score)


def write_timeline(path, probs, labels):
    """Per-chunk probability timeline: ``chunk_index,label,p_0..p_K``.

    Probabilities are written with 17 significant digits so that reading the
    file back reproduces them exactly.
    """
    probs = np.asarray(probs, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["chunk_index", "label"] + [f"p_{k}" for k in range(probs.shape[1])])
        for n, (row, label) in enumerate(zip(probs, labels)):
            out.writerow([n, int(label)] + [f"{v:.17g}" for v in row])


def read_timeline(path):
    """Load a timeline CSV back into an :class:`EvalSet`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["chunk_index", "label"] or len(rows[0]) < 4:
        raise FormatError("missing timeline header", 0)
    width = len(rows[0]) - 2
    probs, labels = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != width + 2:
            raise UsageError(f"timeline line {line} has {len(row)} fields, expected {width + 2}")
        try:
            labels.append(int(row[1]))
            probs.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise UsageError(f"timeline line {line}: {exc}") from None
    return EvalSet(np.array(probs).reshape(-1, width), np.array(labels, dtype=np.int64))
