"""Regret, Q-Error, latency percentiles and selection frequencies."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class RegretSample:
    query_id: int
    chosen_performance: float
    optimal_performance: float
    linear_regret: float
    squared_regret: float


def regret(chosen: float, per_arm_true: Sequence[float]) -> tuple[float, float]:
    """(linear, squared) regret of ``chosen`` against the best arm."""
    arms = np.asarray(per_arm_true, dtype=np.float64)
    if arms.size == 0:
        raise ValueError("need at least one arm")
    linear = float(chosen - arms.min())
    return linear, linear * linear


def regret_sample(query_id: int, chosen: float, per_arm_true: Sequence[float]) -> RegretSample:
    linear, squared = regret(chosen, per_arm_true)
    return RegretSample(query_id, float(chosen), float(np.min(per_arm_true)), linear, squared)


def q_error(x: float, y: float) -> float:
    if not (x > 0 and y > 0):
        raise ValueError(f"q_error needs positive inputs, got {x}, {y}")
    return max(x / y, y / x) - 1.0


def percentiles(latencies: Sequence[float], ps: Iterable[float]) -> np.ndarray:
    """Nearest-rank quantiles: the smallest value with at least ``p`` of the
    sample at or below it."""
    data = np.sort(np.asarray(latencies, dtype=np.float64))
    n = data.size
    if n == 0:
        raise ValueError("no latencies")
    out = []
    for p in ps:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"quantile {p} outside [0, 1]")
        rank = max(1, math.ceil(round(p * n, 9)))
        out.append(data[rank - 1])
    return np.asarray(out)


def selection_frequency(arm_ids, arm_id: int, window: int = 100) -> np.ndarray:
    """Fraction of the trailing ``window`` queries (including the current
    one) that chose ``arm_id``.  Early on the window is whatever has run.

    ``arm_ids`` is a sequence of chosen arms or anything with an
    ``arm_ids`` attribute, such as an episode log.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if hasattr(arm_ids, "arm_ids"):
        arm_ids = arm_ids.arm_ids
        arm_ids = arm_ids() if callable(arm_ids) else arm_ids
    chosen = (np.asarray(arm_ids) == arm_id).astype(np.float64)
    if chosen.size == 0:
        return chosen
    csum = np.concatenate([[0.0], np.cumsum(chosen)])
    t = np.arange(1, chosen.size + 1)
    lo = np.maximum(0, t - window)
    return (csum[t] - csum[lo]) / (t - lo)


# ---------------------------------------------------------------------------
# CSV emitters

def write_regret_csv(path, samples: Sequence[RegretSample]) -> None:
    """Columns: query_id, chosen_performance, optimal_performance,
    linear_regret, squared_regret."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "chosen_performance", "optimal_performance",
                    "linear_regret", "squared_regret"])
        for s in samples:
            w.writerow([s.query_id, repr(s.chosen_performance), repr(s.optimal_performance),
                        repr(s.linear_regret), repr(s.squared_regret)])


def write_percentile_csv(path, latencies: Sequence[float],
                         ps: Sequence[float] = (0.5, 0.95, 0.99, 0.995)) -> None:
    """Columns: quantile, latency."""
    values = percentiles(latencies, ps)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["quantile", "latency"])
        for p, v in zip(ps, values):
            w.writerow([p, repr(float(v))])


def write_selection_csv(path, arm_ids: Sequence[int], num_arms: int, window: int = 100) -> None:
    """Columns: step, arm_0 .. arm_{K-1} (trailing-window frequencies)."""
    series = [selection_frequency(arm_ids, a, window) for a in range(num_arms)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"arm_{a}" for a in range(num_arms)])
        for t in range(len(arm_ids)):
            w.writerow([t] + [f"{s[t]:.6g}" for s in series])
