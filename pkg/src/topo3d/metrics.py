"""Structure-agreement metrics between voxel density fields."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


def binary_accuracy(pred: np.ndarray, target: np.ndarray,
                    threshold: float = 0.5) -> float:
    """Fraction of voxels whose thresholded classes agree.

    Values exactly at the threshold classify as solid.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred >= threshold) == (target >= threshold)))


def rms_accuracy(pred: np.ndarray, target: np.ndarray) -> float:
    """1 minus the root-mean-square difference of float densities."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return 1.0 - float(np.sqrt(np.mean((target - pred) ** 2)))


@dataclass(frozen=True)
class MetricReport:
    binary: float
    rms: float
    count: int
    threshold: float = 0.5
    label: str = ""


def evaluate_pairs(pairs, threshold: float = 0.5, label: str = "") -> MetricReport:
    """Average metrics over (prediction, target) pairs."""
    b_sum = r_sum = 0.0
    n = 0
    for pred, target in pairs:
        b_sum += binary_accuracy(pred, target, threshold)
        r_sum += rms_accuracy(pred, target)
        n += 1
    if n == 0:
        raise ValueError("no prediction pairs to evaluate")
    return MetricReport(b_sum / n, r_sum / n, n, threshold, label)


def write_reports_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "binary_accuracy", "rms_accuracy", "count", "threshold"])
        for r in reports:
            w.writerow([r.label, f"{r.binary:.17g}", f"{r.rms:.17g}",
                        r.count, f"{r.threshold:.17g}"])


def read_reports_csv(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["label", "binary_accuracy", "rms_accuracy", "count", "threshold"]:
        raise ValueError(f"unexpected report header {rows[0]}")
    return [
        MetricReport(float(b), float(r), int(c), float(t), label)
        for label, b, r, c, t in rows[1:]
    ]
