# app/learning/metrics.py
"""
Accuracy, uncertainty and interval quality metrics, per-partition reports,
partition averages and the two summary tables.
"""
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from ..exceptions import MetricError
from .conformal import IcpResult, PredictionIntervals

logger = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class BinSpec:
    """Bin i holds targets in (boundaries[i-1], boundaries[i]]; the outer bins are open-ended."""

    boundaries: Tuple[float, ...] = (2.0, 4.0)
    labels: Tuple[str, ...] = ("low", "med", "high")

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        object.__setattr__(self, "labels", tuple(self.labels))
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise MetricError(f"bin boundaries must be strictly increasing, got {self.boundaries}")
        if len(self.labels) != len(self.boundaries) + 1:
            raise MetricError(f"{len(self.boundaries)} boundaries need {len(self.boundaries) + 1} labels")
        if len(set(self.labels)) != len(self.labels):
            raise MetricError("bin labels must be unique")

    def assign(self, targets) -> Array:
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(targets, dtype=np.float64), side="left")

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "labels": list(self.labels)}


def _pair(a, b) -> Tuple[Array, Array]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def r2(predictions, targets) -> float:
    predictions, targets = _pair(predictions, targets)
    if targets.shape[0] < 2:
        raise MetricError("R2 needs at least two samples")
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise MetricError("R2 is undefined for constant targets")
    return 1.0 - float(((targets - predictions) ** 2).sum()) / ss_tot


def pcc(a, b) -> float:
    a, b = _pair(a, b)
    if a.shape[0] < 2:
        raise MetricError("Pearson correlation needs at least two samples")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise MetricError("Pearson correlation is undefined for a constant input")
    return float(stats.pearsonr(a, b)[0])


def _aligned(intervals: PredictionIntervals, targets) -> Array:
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(intervals) != targets.shape[0]:
        raise MetricError(f"{len(intervals)} intervals for {targets.shape[0]} targets")
    if targets.shape[0] == 0:
        raise MetricError("no intervals to evaluate")
    return targets


def coverage(intervals: PredictionIntervals, targets) -> float:
    """Fraction of targets inside their closed interval."""
    targets = _aligned(intervals, targets)
    return float(intervals.covers(targets).mean())


def unbounded_count(intervals: PredictionIntervals) -> int:
    return int((~intervals.bounded).sum())


def mean_width(intervals: PredictionIntervals) -> float:
    """Average upper - lower; +inf when any interval is unbounded (see ``unbounded_count``)."""
    if len(intervals) == 0:
        raise MetricError("no intervals to evaluate")
    if unbounded_count(intervals):
        return math.inf
    return float(intervals.width.mean())


def conditional_coverage(intervals: PredictionIntervals, targets, bins: BinSpec) -> Dict[str, float]:
    """Coverage within each target bin; empty bins are left out."""
    targets = _aligned(intervals, targets)
    covered = intervals.covers(targets)
    assignment = bins.assign(targets)
    return {
        label: float(covered[assignment == i].mean())
        for i, label in enumerate(bins.labels)
        if np.any(assignment == i)
    }


def mad_conditional_coverage(per_bin: Dict[str, float], cl: float) -> float:
    """Unweighted mean of |bin coverage - cl| over the non-empty bins."""
    if not per_bin:
        raise MetricError("no non-empty bins")
    return float(np.mean([abs(value - cl) for value in per_bin.values()]))


@dataclass
class EvaluationReport:
    method: str
    confidence_level: float
    r2: float
    pcc_uncertainty_error: Optional[float]
    coverage: float
    mean_width: float
    conditional_coverage: Dict[str, float] = field(default_factory=dict)
    mad_conditional_coverage: float = 0.0
    n_test: int = 0
    n_unbounded: int = 0
    q_hat: Optional[float] = None
    partition: Optional[int] = None

    @property
    def is_aggregate(self) -> bool:
        return self.partition is None

    def to_dict(self) -> dict:
        payload = asdict(self)
        # JSON has no infinity
        payload["mean_width"] = self.mean_width if math.isfinite(self.mean_width) else None
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "EvaluationReport":
        data = dict(payload)
        if data.get("mean_width") is None:
            data["mean_width"] = math.inf
        return cls(**data)


def evaluate(result: IcpResult, method: str, confidence_level: float, bins: BinSpec, partition: Optional[int] = None) -> EvaluationReport:
    """
    Full report for one ICP run. The uncertainty/error correlation is left
    empty when sigma is constant, as for plain ICP.
    """
    targets = result.targets
    if targets is None:
        raise MetricError("evaluation needs test targets")
    errors = np.abs(targets - result.predictions)
    correlation = None
    if np.ptp(result.sigma) > 0 and np.ptp(errors) > 0:
        correlation = pcc(result.sigma, errors)
    per_bin = conditional_coverage(result.intervals, targets, bins)
    report = EvaluationReport(
        method=method,
        confidence_level=confidence_level,
        r2=r2(result.predictions, targets),
        pcc_uncertainty_error=correlation,
        coverage=coverage(result.intervals, targets),
        mean_width=mean_width(result.intervals),
        conditional_coverage=per_bin,
        mad_conditional_coverage=mad_conditional_coverage(per_bin, confidence_level),
        n_test=int(targets.shape[0]),
        n_unbounded=unbounded_count(result.intervals),
        q_hat=result.calibration.q_hat if result.calibration.bounded else None,
        partition=partition,
    )
    logger.debug("%s cl=%.2f partition=%s coverage=%.4f width=%.4g", method, confidence_level, partition, report.coverage, report.mean_width)
    return report


def _mean(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def aggregate_reports(reports: Iterable[EvaluationReport]) -> List[EvaluationReport]:
    """
    One report per (method, confidence level) averaging the per-partition
    values. Bin coverages average over the partitions where the bin is
    populated; the MAD is the mean of the per-partition MADs.
    """
    groups: Dict[Tuple[str, float], List[EvaluationReport]] = defaultdict(list)
    for report in reports:
        if report.is_aggregate:
            continue
        groups[(report.method, report.confidence_level)].append(report)

    out = []
    for (method, cl), members in groups.items():
        members = sorted(members, key=lambda r: r.partition)
        labels = []
        for member in members:
            labels += [label for label in member.conditional_coverage if label not in labels]
        out.append(EvaluationReport(
            method=method,
            confidence_level=cl,
            r2=_mean([r.r2 for r in members]),
            pcc_uncertainty_error=_mean([r.pcc_uncertainty_error for r in members]),
            coverage=_mean([r.coverage for r in members]),
            mean_width=_mean([r.mean_width for r in members]),
            conditional_coverage={
                label: _mean([r.conditional_coverage.get(label) for r in members]) for label in labels
            },
            mad_conditional_coverage=_mean([r.mad_conditional_coverage for r in members]),
            n_test=sum(r.n_test for r in members),
            n_unbounded=sum(r.n_unbounded for r in members),
            q_hat=None,
            partition=None,
        ))
    return out


def report_tables(reports: Iterable[EvaluationReport], bins: BinSpec, method_order: Optional[List[str]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    (accuracy table, interval table). The first carries R2, the
    uncertainty/error PCC, coverage per target bin and the MAD of the bin
    coverages; the second carries marginal coverage and mean width.
    """
    reports = list(reports)
    order = {m: i for i, m in enumerate(method_order or sorted({r.method for r in reports}))}
    reports.sort(key=lambda r: (order.get(r.method, len(order)), r.method, r.confidence_level))

    accuracy = pd.DataFrame([
        {
            "method": r.method,
            "confidence_level": r.confidence_level,
            "r2": r.r2,
            "pcc_uncertainty_error": r.pcc_uncertainty_error,
            **{f"coverage_{label}": r.conditional_coverage.get(label) for label in bins.labels},
            "mad_conditional_coverage": r.mad_conditional_coverage,
        }
        for r in reports
    ])
    intervals = pd.DataFrame([
        {
            "method": r.method,
            "confidence_level": r.confidence_level,
            "coverage": r.coverage,
            "mean_width": r.mean_width,
            "n_unbounded": r.n_unbounded,
        }
        for r in reports
    ])
    return accuracy, intervals
