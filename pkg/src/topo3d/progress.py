"""Iteration-progress instrumentation of optimization traces.

Tracks how fast the structure resolves: the binary-accuracy-vs-final curve,
the raw change norm, and the spatial-map change norm whose drop below a
small threshold marks the solver-to-network handoff point.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .metrics import binary_accuracy
from .simp import FilterKernel, IterationTrace


@dataclass(frozen=True)
class ProgressCurve:
    """Per-iteration scalar values with normalized progress fractions t/T."""

    iterations: np.ndarray
    progress: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if not (len(self.iterations) == len(self.progress) == len(self.values)):
            raise ValueError("curve arrays must have equal length")
        if np.any(np.diff(self.progress) <= 0):
            raise ValueError("progress must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    def normalized(self) -> np.ndarray:
        """Values scaled to [0, 1] per curve (plotting aid only)."""
        lo, hi = self.values.min(), self.values.max()
        if hi == lo:
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["progress", "iteration", "value"])
            for p, i, v in zip(self.progress, self.iterations, self.values):
                w.writerow([f"{p:.17g}", int(i), f"{v:.17g}"])

    @classmethod
    def from_csv(cls, path) -> "ProgressCurve":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows[0] != ["progress", "iteration", "value"]:
            raise ValueError(f"unexpected curve header {rows[0]}")
        data = np.array([[float(p), float(i), float(v)] for p, i, v in rows[1:]])
        return cls(data[:, 1].astype(int), data[:, 0], data[:, 2])


def _curve(trace_len: int, values) -> ProgressCurve:
    t = np.arange(trace_len)
    big_t = trace_len - 1
    if big_t < 1:
        raise ValueError("trace must contain at least two iterates")
    return ProgressCurve(t, t / big_t, np.asarray(values, dtype=float))


def binary_accuracy_curve(trace: IterationTrace, threshold: float = 0.5) -> ProgressCurve:
    """Thresholded agreement of every iterate with the final structure."""
    final = trace.final
    vals = [binary_accuracy(f, final, threshold) for f in trace.fields]
    return _curve(len(trace), vals)


def gradient_norm_curve(trace: IterationTrace) -> ProgressCurve:
    """Frobenius norm of the raw iteration-to-iteration density change."""
    if len(trace) < 2:
        raise ValueError("gradient curve needs at least two iterates")
    vals = [0.0]
    for t in range(1, len(trace)):
        vals.append(float(np.linalg.norm(trace.fields[t] - trace.fields[t - 1])))
    vals[0] = vals[1]
    return _curve(len(trace), vals)


def spatial_map(x: np.ndarray, kernel: FilterKernel) -> np.ndarray:
    """Deviation of each density from its filtered neighborhood mean."""
    x = np.asarray(x, dtype=float)
    return x - kernel.apply(x)


def spatial_gradient_curve(trace: IterationTrace, kernel: FilterKernel) -> ProgressCurve:
    """Frobenius norm of the spatial-map change between consecutive iterates."""
    if len(trace) < 2:
        raise ValueError("spatial gradient curve needs at least two iterates")
    maps = [spatial_map(f, kernel) for f in trace.fields]
    vals = [0.0]
    for t in range(1, len(trace)):
        vals.append(float(np.linalg.norm(maps[t] - maps[t - 1])))
    vals[0] = vals[1]
    return _curve(len(trace), vals)


class CutoffResult(NamedTuple):
    iteration: int
    triggered: bool


def cutoff_iteration(trace: IterationTrace, kernel: FilterKernel,
                     tau: float = 0.05) -> CutoffResult:
    """First iteration whose spatial-map change norm is <= tau.

    Falls back to the last iteration with triggered=False when the norm
    never drops that low (callers then run the solver to convergence).
    """
    if len(trace) < 2:
        raise ValueError("cutoff detection needs at least two iterates")
    prev = spatial_map(trace.fields[0], kernel)
    for t in range(1, len(trace)):
        cur = spatial_map(trace.fields[t], kernel)
        if float(np.linalg.norm(cur - prev)) <= tau:
            return CutoffResult(t, True)
        prev = cur
    return CutoffResult(len(trace) - 1, False)
