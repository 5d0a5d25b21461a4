"""Coverage-calibrated evaluation and risk-coverage tables."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

TABLE_COVERAGES = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)
METRICS = ("mse", "mae", "accuracy")


@dataclass
class ScoredPredictions:
    predictions: np.ndarray
    confidences: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n = len(self.confidences)
        if len(self.predictions) != n or len(self.targets) != n:
            raise ValueError(
                f"length mismatch: predictions {len(self.predictions)}, confidences {n}, targets {len(self.targets)}"
            )

    def __len__(self) -> int:
        return len(self.confidences)


def selection_count(m: int, c: float) -> int:
    return int(math.floor(c * m + 0.5))


def calibrate_coverage(sp: ScoredPredictions, c: float) -> np.ndarray:
    """Indices of the ``round(c * m)`` most confident rows, in rank order.

    Ties in confidence go to the lower index.
    """
    if not 0.0 < c <= 1.0:
        raise ValueError(f"coverage must be in (0, 1], got {c}")
    k = selection_count(len(sp), c)
    if k == 0:
        raise ValueError(f"coverage {c} selects no rows out of {len(sp)}")
    order = np.lexsort((np.arange(len(sp)), -sp.confidences))
    return order[:k]


def selective_metric(sp: ScoredPredictions, selected: np.ndarray, metric: str, unit: float = 1.0) -> float:
    """Metric over the selected rows; absolute errors are divided by ``unit``.

    ``mse`` is returned in squared natural units (``unit`` is ignored), as
    the tables report it.  ``accuracy`` compares argmax predictions with
    integer class targets.
    """
    selected = np.asarray(selected)
    if selected.size == 0:
        raise ValueError("selective_metric: nothing selected")
    pred = sp.predictions[selected]
    tgt = sp.targets[selected]
    if metric == "accuracy":
        labels = pred.argmax(axis=1) if pred.ndim == 2 else pred
        return float(np.mean(labels == tgt.reshape(-1)))
    err = pred.reshape(len(selected), -1) - tgt.reshape(len(selected), -1)
    if metric == "mse":
        return float(np.mean(np.sum(err * err, axis=1)))
    if metric == "mae":
        return float(np.mean(np.sum(np.abs(err), axis=1))) / unit
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def risk_coverage_curve(
    sp: ScoredPredictions, coverages: Iterable[float], metric: str, unit: float = 1.0
) -> dict[float, float]:
    return {c: selective_metric(sp, calibrate_coverage(sp, c), metric, unit) for c in coverages}


@dataclass(frozen=True)
class RiskCoverageRow:
    method: str
    dataset: str
    coverage: int
    metric: str
    mean: float
    std: float
    trials: int


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and n-1 sample std; a single value has std 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_std: no values")
    # sorted so the result does not depend on trial order
    arr = np.sort(arr)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(
    values: Mapping[float, Sequence[float]], metric: str, method: str = "", dataset: str = ""
) -> list[RiskCoverageRow]:
    rows = []
    for c in sorted(values, reverse=True):
        mu, sd = mean_std(values[c])
        rows.append(RiskCoverageRow(method, dataset, int(round(c * 100)), metric, mu, sd, len(values[c])))
    return rows


def risk_coverage_report(
    trials: Sequence[ScoredPredictions],
    coverages: Iterable[float] = TABLE_COVERAGES,
    metric: str = "mse",
    unit: float = 1.0,
    method: str = "",
    dataset: str = "",
) -> list[RiskCoverageRow]:
    """Per-coverage mean and std of the calibrated metric across trials."""
    if not trials:
        raise ValueError("risk_coverage_report: need at least one trial")
    coverages = list(coverages)
    per_cov: dict[float, list[float]] = {c: [] for c in coverages}
    for sp in trials:
        for c, v in risk_coverage_curve(sp, coverages, metric, unit).items():
            per_cov[c].append(v)
    return aggregate(per_cov, metric, method, dataset)


REPORT_COLUMNS = tuple(f.name for f in fields(RiskCoverageRow))


def write_report_csv(rows: Iterable[RiskCoverageRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(row)])
    return path


def read_report_csv(path: str | Path) -> list[RiskCoverageRow]:
    with open(path, newline="") as fh:
        return [
            RiskCoverageRow(
                r["method"], r["dataset"], int(r["coverage"]), r["metric"], float(r["mean"]), float(r["std"]), int(r["trials"])
            )
            for r in csv.DictReader(fh)
        ]
