"""Task-imbalance quantification and conversion into per-interval data quotas.

The chain is: validation PSNR distance against a frozen single-task
reference -> clipped exponential weight -> normalized weight -> exact
integer sample quota via largest-remainder rounding. All functions are
pure; `plan_interval` composes them and keeps the intermediate values for
the audit trail.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .img import PSNR_CAP


class RebalanceError(ValueError):
    """Invalid snapshots, weights, or quota parameters."""


@dataclass(frozen=True)
class TaskSnapshot:
    """Validation PSNR of the frozen reference vs the current shared net."""

    task_id: int
    psnr_single: float
    psnr_multi: float

    def __post_init__(self):
        for name in ("psnr_single", "psnr_multi"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise RebalanceError(f"{name} must be finite, got {v}")
            if v > PSNR_CAP:
                raise RebalanceError(f"{name} exceeds PSNR_CAP ({v} > {PSNR_CAP})")


@dataclass(frozen=True)
class IntervalPlan:
    """Per-interval normalized task weights and exact integer quotas."""

    interval_index: int
    weights: tuple
    quotas: tuple
    total: int
    distances: tuple  # raw (unclipped) PSNR distances, for the audit trail

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise RebalanceError(f"weights must sum to 1, got {sum(self.weights)}")
        if any(w <= 0 for w in self.weights):
            raise RebalanceError("all weights must be positive")
        if sum(self.quotas) != self.total:
            raise RebalanceError(f"quotas sum {sum(self.quotas)} != total {self.total}")


def psnr_distance(snap: TaskSnapshot) -> float:
    """Reference PSNR minus shared-model PSNR; positive means under-served."""
    return snap.psnr_single - snap.psnr_multi


def compute_weights(snaps: Sequence[TaskSnapshot], clip: float = 1.0) -> np.ndarray:
    """Normalized exp(clipped PSNR distance) weights, one per snapshot."""
    if len(snaps) < 2:
        raise RebalanceError(f"need at least 2 tasks, got {len(snaps)}")
    if clip <= 0:
        raise RebalanceError(f"clip must be positive, got {clip}")
    d = np.array([psnr_distance(s) for s in snaps], dtype=np.float64)
    raw = np.exp(np.clip(d, -clip, clip))
    return raw / raw.sum()


def _check_normalized(weights: np.ndarray):
    if weights.ndim != 1 or weights.size < 1:
        raise RebalanceError("weights must be a non-empty 1-d vector")
    if np.any(weights < 0):
        raise RebalanceError("weights must be non-negative")
    if abs(float(weights.sum()) - 1.0) > 1e-6:
        raise RebalanceError(f"weights must sum to 1, got {float(weights.sum())}")


def largest_remainder(weights, total: int) -> np.ndarray:
    """Round total*weights to integers summing to total, |error| <= 1 per entry.

    Fractional-part ties go to the lower task index.
    """
    w = np.asarray(weights, dtype=np.float64)
    _check_normalized(w)
    if total < 0:
        raise RebalanceError(f"total must be >= 0, got {total}")
    exact = total * w
    base = np.floor(exact).astype(np.int64)
    remainder = int(total - base.sum())
    fracs = exact - base
    order = sorted(range(w.size), key=lambda i: (-fracs[i], i))
    quotas = base.copy()
    for i in order[:remainder]:
        quotas[i] += 1
    return quotas


def weights_to_quotas(weights, total: int, floor_min: int = 1) -> np.ndarray:
    """Largest-remainder quotas with a per-task floor, summing to total exactly.

    Lifting starved tasks to `floor_min` takes the deficit from the tasks
    with the largest quotas (among ties, the smallest weight donates), which
    keeps quotas ordered like the weights.
    """
    w = np.asarray(weights, dtype=np.float64)
    _check_normalized(w)
    if floor_min < 0:
        raise RebalanceError(f"floor_min must be >= 0, got {floor_min}")
    if total < w.size * floor_min:
        raise RebalanceError(
            f"total {total} cannot satisfy floor {floor_min} for {w.size} tasks"
        )
    quotas = largest_remainder(w, total)
    deficit = int(np.sum(np.maximum(floor_min - quotas, 0)))
    quotas = np.maximum(quotas, floor_min)
    for _ in range(deficit):
        above = np.flatnonzero(quotas > floor_min)
        donors = above[quotas[above] == quotas[above].max()]
        donor = donors[np.lexsort((-donors, w[donors]))[0]]
        quotas[donor] -= 1
    return quotas


def equivalence_oracle(task_losses: Sequence[Sequence[float]], weights):
    """Evaluate the weighted multi-task loss two ways and return both.

    The first sums per-task means scaled by task weights; the second walks
    the flattened sample list with per-sample weights w_i / N_i. The two are
    algebraically identical, which is what licenses trading loss weights for
    sample-count quotas.
    """
    w = np.asarray(weights, dtype=np.float64)
    if len(task_losses) != w.size:
        raise RebalanceError(f"{len(task_losses)} loss groups vs {w.size} weights")
    groups = [np.asarray(g, dtype=np.float64) for g in task_losses]
    for i, g in enumerate(groups):
        if g.size == 0:
            raise RebalanceError(f"task {i} has no samples")
    weighted_task_loss = float(
        sum(w[i] * float(np.mean(g)) for i, g in enumerate(groups))
    )
    sample_weighted_loss = 0.0
    for i, g in enumerate(groups):
        per_sample = w[i] / g.size
        for loss in g:
            sample_weighted_loss += per_sample * float(loss)
    return weighted_task_loss, sample_weighted_loss


def plan_interval(
    k: int,
    snaps: Sequence[TaskSnapshot],
    total: int,
    clip: float = 1.0,
    floor_min: int | None = None,
) -> IntervalPlan:
    """Compose weighting and quota conversion for one training interval."""
    weights = compute_weights(snaps, clip)
    if floor_min is None:
        floor_min = max(1, round(0.01 * total))
    quotas = weights_to_quotas(weights, total, floor_min)
    distances = tuple(psnr_distance(s) for s in snaps)
    return IntervalPlan(
        interval_index=k,
        weights=tuple(float(x) for x in weights),
        quotas=tuple(int(q) for q in quotas),
        total=int(total),
        distances=distances,
    )


# ---------------------------------------------------------------------------
# CSV audit trail

PLAN_CSV_HEADER = ("interval", "task", "psnr_single", "psnr_multi", "distance", "weight", "quota")


def plan_rows(plan: IntervalPlan, snaps: Sequence[TaskSnapshot]):
    """One CSV row per task for this interval."""
    if len(snaps) != len(plan.weights):
        raise RebalanceError("snapshot count does not match plan")
    rows = []
    for i, snap in enumerate(snaps):
        rows.append(
            {
                "interval": plan.interval_index,
                "task": snap.task_id,
                "psnr_single": snap.psnr_single,
                "psnr_multi": snap.psnr_multi,
                "distance": plan.distances[i],
                "weight": plan.weights[i],
                "quota": plan.quotas[i],
            }
        )
    return rows


def _csv_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_plan_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PLAN_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(v) for k, v in row.items()})


def read_plan_csv(path):
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PLAN_CSV_HEADER:
            raise RebalanceError(f"{path}: unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "interval": int(row["interval"]),
                        "task": int(row["task"]),
                        "psnr_single": float(row["psnr_single"]),
                        "psnr_multi": float(row["psnr_multi"]),
                        "distance": float(row["distance"]),
                        "weight": float(row["weight"]),
                        "quota": int(row["quota"]),
                    }
                )
            except (TypeError, ValueError, KeyError) as exc:
                raise RebalanceError(f"{path}: bad row at line {lineno}: {exc}") from exc
    return rows
