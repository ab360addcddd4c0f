"""Rotation-error evaluation: per-query records and aggregate summaries.

Errors are geodesic distances on SO(3) in degrees. Summaries report the
median error and, for each threshold tau, the fraction of records with
error strictly below tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import geodesic_distance

__all__ = [
    "EvalRecord",
    "EvalSummary",
    "summarize",
    "summarize_by_category",
    "format_results_table",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = (15.0, 30.0)


@dataclass(frozen=True, eq=False)
class EvalRecord:
    """One query's outcome: estimated vs ground-truth rotation."""

    query_id: str
    rotation_est: np.ndarray
    rotation_gt: np.ndarray
    error_deg: float
    best_view_index: int
    iterations_run: int
    category: str = ""

    def __post_init__(self):
        for name in ("rotation_est", "rotation_gt"):
            R = np.asarray(getattr(self, name), dtype=float)
            if R.shape != (3, 3) or not np.all(np.isfinite(R)):
                raise ValueError(f"{name} must be a finite 3x3 matrix")
            R = R.copy()
            R.flags.writeable = False
            object.__setattr__(self, name, R)
        if not (np.isfinite(self.error_deg) and 0.0 <= self.error_deg <= 180.0):
            raise ValueError(f"error_deg must be in [0, 180], got {self.error_deg!r}")

    @classmethod
    def from_rotations(
        cls,
        query_id: str,
        rotation_est,
        rotation_gt,
        best_view_index: int = -1,
        iterations_run: int = 0,
        category: str = "",
    ) -> "EvalRecord":
        """Build a record, computing the geodesic error from the rotations."""
        err = math.degrees(geodesic_distance(rotation_est, rotation_gt))
        return cls(
            query_id=query_id,
            rotation_est=rotation_est,
            rotation_gt=rotation_gt,
            error_deg=err,
            best_view_index=best_view_index,
            iterations_run=iterations_run,
            category=category,
        )


@dataclass(frozen=True)
class EvalSummary:
    """Median error plus strict-threshold accuracies over n records."""

    median_err_deg: float
    acc_at: dict = field(default_factory=dict)
    n: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("summary needs at least one record")
        taus = sorted(self.acc_at)
        fracs = [self.acc_at[t] for t in taus]
        if any(not 0.0 <= f <= 1.0 for f in fracs):
            raise ValueError("accuracies must be fractions in [0, 1]")
        if any(a > b for a, b in zip(fracs, fracs[1:])):
            raise ValueError("accuracy must be non-decreasing in the threshold")


def summarize(records, thresholds=DEFAULT_THRESHOLDS) -> EvalSummary:
    """Median error and strict sub-threshold fractions over the records.

    The median of an even count is the midpoint of the two middle values;
    acc_at[tau] counts errors strictly below tau.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to summarize")
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending")
    errors = np.array([r.error_deg for r in records])
    acc = {t: float(np.count_nonzero(errors < t)) / len(records) for t in thresholds}
    return EvalSummary(
        median_err_deg=float(np.median(errors)), acc_at=acc, n=len(records)
    )


def summarize_by_category(records, thresholds=DEFAULT_THRESHOLDS):
    """Per-category summaries plus the pooled summary over all records.

    Returns (by_category, pooled) where by_category maps category name to
    its EvalSummary, in sorted category order.
    """
    records = list(records)
    pooled = summarize(records, thresholds)
    by_cat = {}
    for cat in sorted({r.category for r in records}):
        by_cat[cat] = summarize([r for r in records if r.category == cat], thresholds)
    return by_cat, pooled


def format_results_table(rows, thresholds=DEFAULT_THRESHOLDS) -> str:
    """Aligned text table of (label, EvalSummary) rows.

    Columns: category, n, med.err, then one acc.<tau> column per threshold.
    """
    thresholds = [float(t) for t in thresholds]
    header = ["category", "n", "med.err"] + [f"acc.{t:g}" for t in thresholds]
    body = []
    for label, summary in rows:
        body.append(
            [label, str(summary.n), f"{summary.median_err_deg:.2f}"]
            + [f"{summary.acc_at[t]:.3f}" for t in thresholds]
        )
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append(
            "  ".join(
                cell.ljust(w) if i == 0 else cell.rjust(w)
                for i, (cell, w) in enumerate(zip(row, widths))
            ).rstrip()
        )
    return "\n".join(lines) + "\n"
