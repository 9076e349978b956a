"""Accuracy, expected calibration error, predictive entropy, and PAvsPU.

All functions are pure; probability rows are expected to sum to 1 within 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_N_BINS = 10
DEFAULT_CURVE_POINTS = 20


@dataclass
class CalibrationReport:
    accuracy: float
    ece: float
    bin_counts: np.ndarray
    bin_accuracy: np.ndarray
    bin_confidence: np.ndarray
    entropy: np.ndarray  # per evaluated node
    pavspu_thresholds: np.ndarray
    pavspu_values: np.ndarray


def _check_mask(mask):
    mask = np.asarray(mask, dtype=np.intp)
    if mask.size == 0:
        raise ValueError("empty evaluation mask")
    return mask


def accuracy(probs, labels, mask) -> float:
    """Fraction of masked nodes whose argmax class (ties -> lowest index)
    matches the label."""
    mask = _check_mask(mask)
    pred = np.argmax(probs[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


def ece(probs, labels, mask, n_bins=DEFAULT_N_BINS) -> float:
    """Equal-width right-closed confidence bins; empty bins contribute 0."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    mask = _check_mask(mask)
    counts, accs, confs = _bin_stats(probs, labels, mask, n_bins)
    n = mask.size
    nonempty = counts > 0
    return float(np.sum(counts[nonempty] / n * np.abs(accs[nonempty] - confs[nonempty])))


def _bin_stats(probs, labels, mask, n_bins):
    rows = probs[mask]
    conf = rows.max(axis=1)
    correct = (np.argmax(rows, axis=1) == np.asarray(labels)[mask]).astype(np.float64)
    # bin i holds confidences in (i/n, (i+1)/n]; conf 0 falls into bin 0
    idx = np.clip(np.ceil(conf * n_bins).astype(np.intp) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    accs = np.zeros(n_bins)
    confs = np.zeros(n_bins)
    nonempty = counts > 0
    accs[nonempty] = np.bincount(idx, weights=correct, minlength=n_bins)[nonempty] / counts[nonempty]
    confs[nonempty] = np.bincount(idx, weights=conf, minlength=n_bins)[nonempty] / counts[nonempty]
    return counts, accs, confs


def predictive_entropy(probs) -> np.ndarray:
    """Per-row natural-log entropy with 0 log 0 := 0."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def pavspu(probs, labels, mask, threshold) -> float:
    """(n_ac + n_iu) / total with certain := entropy < threshold (strict)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    mask = _check_mask(mask)
    rows = probs[mask]
    acc = np.argmax(rows, axis=1) == np.asarray(labels)[mask]
    certain = predictive_entropy(rows) < threshold
    n_ac = np.sum(acc & certain)
    n_iu = np.sum(~acc & ~certain)
    return float((n_ac + n_iu) / mask.size)


def pavspu_curve(probs, labels, mask, n_points=DEFAULT_CURVE_POINTS):
    """PAvsPU over evenly spaced entropy thresholds in [0, ln C]."""
    n_classes = probs.shape[1]
    thresholds = np.linspace(0.0, np.log(n_classes), n_points)
    values = np.array([pavspu(probs, labels, mask, t) for t in thresholds])
    return thresholds, values


def calibration_report(probs, labels, mask, n_bins=DEFAULT_N_BINS) -> CalibrationReport:
    mask = _check_mask(mask)
    counts, accs, confs = _bin_stats(probs, labels, mask, n_bins)
    thresholds, values = pavspu_curve(probs, labels, mask)
    return CalibrationReport(
        accuracy=accuracy(probs, labels, mask),
        ece=ece(probs, labels, mask, n_bins),
        bin_counts=counts,
        bin_accuracy=accs,
        bin_confidence=confs,
        entropy=predictive_entropy(probs[mask]),
        pavspu_thresholds=thresholds,
        pavspu_values=values,
    )
