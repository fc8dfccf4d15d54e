"""Evaluation arithmetic: MCC localization, NMI attribution, detection rates.

All scores are computed at block resolution over the interior block grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .jpeg import QuantMatrix

PRISTINE = "pristine"
TAMPERED = "tampered"


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class GroundTruth:
    """True block classes: 0 = background, 1..k-1 = donor regions."""

    labels: np.ndarray
    k: int
    region_q1: list[QuantMatrix] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.max(initial=0) >= self.k:
            raise ValueError("ground-truth labels must be < k")


def _labels_of(m) -> np.ndarray:
    arr = m.labels if hasattr(m, "labels") else m
    return np.asarray(arr, dtype=np.int64)


def binary_counts(gt: GroundTruth, m) -> ConfusionCounts:
    """Pixel counts with any nonzero label treated as foreground."""
    truth = _labels_of(gt) != 0
    pred = _labels_of(m) != 0
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: gt {truth.shape} vs map {pred.shape}")
    return ConfusionCounts(
        tp=int(np.sum(truth & pred)),
        tn=int(np.sum(~truth & ~pred)),
        fp=int(np.sum(~truth & pred)),
        fn=int(np.sum(truth & ~pred)),
    )


def mcc(gt: GroundTruth, m) -> float:
    """Matthews correlation coefficient of the binarized maps.

    Any zero bracketed sum at the denominator forces the denominator to one.
    """
    c = binary_counts(gt, m)
    num = c.tp * c.tn - c.fp * c.fn
    brackets = [(c.tp + c.fp), (c.tp + c.fn), (c.tn + c.fp), (c.tn + c.fn)]
    if any(b == 0 for b in brackets):
        return float(num)
    return num / float(np.sqrt(np.prod([float(b) for b in brackets])))


def nmi(gt: GroundTruth, m) -> float:
    """Normalized mutual information 2*I(y;c) / (H(y) + H(c)), natural log."""
    y = _labels_of(gt).ravel()
    c = _labels_of(m).ravel()
    if y.shape != c.shape:
        raise ValueError(f"shape mismatch: gt {y.shape} vs map {c.shape}")
    n = y.size
    y_ids, y_inv = np.unique(y, return_inverse=True)
    c_ids, c_inv = np.unique(c, return_inverse=True)
    joint = np.zeros((len(y_ids), len(c_ids)))
    np.add.at(joint, (y_inv, c_inv), 1.0)
    joint /= n
    py = joint.sum(axis=1)
    pc = joint.sum(axis=0)
    hy = -np.sum(py * np.log(py))
    hc = -np.sum(pc * np.log(pc))
    if hy + hc == 0.0:
        return 1.0
    nz = joint > 0
    info = np.sum(joint[nz] * np.log(joint[nz] / np.outer(py, pc)[nz]))
    num, den = 2.0 * info, hy + hc
    # num == den in exact arithmetic for any relabelling of a perfect map;
    # snap the rounding residue so perfect clusterings score exactly 1
    if num >= den * (1.0 - 1e-12):
        return 1.0
    return max(0.0, float(num / den))


def detect(k_r: int) -> str:
    """Forensic decision from the refined cluster count."""
    if k_r < 1:
        raise ValueError(f"cluster count must be >= 1, got {k_r}")
    return TAMPERED if k_r > 1 else PRISTINE


def aggregate(results) -> dict:
    """Detection rates over (true k, decision) pairs.

    Returns tpr, fpr and accuracy; a rate whose class is absent from the
    input is reported as None rather than zero.
    """
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    pos = [d for k, d in results if k > 1]
    neg = [d for k, d in results if k == 1]
    tpr = sum(d == TAMPERED for d in pos) / len(pos) if pos else None
    fpr = sum(d == TAMPERED for d in neg) / len(neg) if neg else None
    correct = sum((d == TAMPERED) == (k > 1) for k, d in results)
    return {"tpr": tpr, "fpr": fpr, "accuracy": correct / len(results)}
