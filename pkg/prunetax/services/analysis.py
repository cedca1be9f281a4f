"""
Post-processing of pruning results.

- operating_point: sparsity reached before test accuracy drops by more
  than a threshold
- summarize: one SummaryRow per run
- pareto_front: signals not dominated in (sparsity, accuracy)
- compare_reductions: gain from replacing sum by another reduction
- retrain_report: retraining effort vs sparsity reached without retraining
- category_report: best signal per information category
"""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import spearmanr

from prunetax.core.errors import PruneTaxError
from prunetax.core.records import ExperimentRecord, ResultRow, SummaryRow
from prunetax.core.signals import Reduction, SignalSpec

logger = logging.getLogger(__name__)


class OperatingPoint(BaseModel):
    sparsity: float
    test_acc: float
    retrain_steps: int  # cumulative up to and including the point
    step: Optional[int] = None  # None when no iteration stayed within the drop


def operating_point(
    records: Sequence[ExperimentRecord],
    initial_test_acc: float,
    drop: float = 0.01,
) -> OperatingPoint:
    """Last record before the first one whose test accuracy drop exceeds `drop`."""
    point = OperatingPoint(sparsity=0.0, test_acc=initial_test_acc, retrain_steps=0)
    for record in records:
        if initial_test_acc - record.test_acc > drop:
            break
        point = OperatingPoint(
            sparsity=record.sparsity,
            test_acc=record.test_acc,
            retrain_steps=record.cumulative_retrain_steps,
            step=record.step,
        )
    return point


def summarize(
    signal_id: str,
    seed: int,
    retrain: str,
    records: Sequence[ExperimentRecord],
    initial_test_acc: float,
    drop: float = 0.01,
) -> SummaryRow:
    point = operating_point(records, initial_test_acc, drop)
    last = records[-1] if records else None
    return SummaryRow(
        signal_id=signal_id,
        seed=seed,
        retrain=retrain,
        steps=len(records),
        initial_test_acc=initial_test_acc,
        sparsity_at_1pct=point.sparsity,
        test_acc_at_1pct=point.test_acc,
        retrain_steps_at_1pct=point.retrain_steps,
        sparsity_at_stop=last.sparsity if last else 0.0,
        test_acc_at_stop=last.test_acc if last else initial_test_acc,
        cumulative_retrain_steps=last.cumulative_retrain_steps if last else 0,
    )


def summaries_from_results(rows: Iterable[ResultRow], initial_test_acc: dict[tuple[str, int], float]) -> list[SummaryRow]:
    """Group per-step rows by (signal, seed) and summarize each group."""
    groups: dict[tuple[str, int], list[ResultRow]] = defaultdict(list)
    for row in rows:
        groups[(row.signal_id, row.seed)].append(row)
    summaries = []
    for key, group in groups.items():
        group.sort(key=lambda r: r.step)
        baseline = initial_test_acc.get(key, group[0].test_acc)
        summaries.append(summarize(key[0], key[1], "", group, baseline))
    return summaries


# =============================================================================
# Pareto front
# =============================================================================

class ParetoPoint(BaseModel):
    signal_id: str
    sparsity: float
    accuracy: float


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """
    Points not dominated in (sparsity up, accuracy up).

    A point dominates another when it is no worse on both axes and
    strictly better on one. Output is sorted by sparsity, stably.
    """
    if not points:
        raise PruneTaxError("no points to compare")
    front = []
    for p in points:
        dominated = any(
            q.sparsity >= p.sparsity and q.accuracy >= p.accuracy
            and (q.sparsity > p.sparsity or q.accuracy > p.accuracy)
            for q in points
        )
        if not dominated:
            front.append(p)
    return sorted(front, key=lambda p: p.sparsity)


def pareto_points(summaries: Iterable[SummaryRow], operating: str = "1pct") -> list[ParetoPoint]:
    """Mean (sparsity, accuracy) per signal over seeds, from successful runs."""
    grouped: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for row in summaries:
        if row.status != "ok":
            continue
        if operating == "stop":
            grouped[row.signal_id].append((row.sparsity_at_stop, row.test_acc_at_stop))
        else:
            grouped[row.signal_id].append((row.sparsity_at_1pct, row.test_acc_at_1pct))
    return [
        ParetoPoint(
            signal_id=signal_id,
            sparsity=float(np.mean([v[0] for v in values])),
            accuracy=float(np.mean([v[1] for v in values])),
        )
        for signal_id, values in grouped.items()
    ]


# =============================================================================
# Reduction comparison
# =============================================================================

class ReductionImprovement(BaseModel):
    triple: str
    reduction: str
    sparsity_sum: float
    sparsity_alt: float
    improvement: float  # sparsity_alt - sparsity_sum


class ReductionMean(BaseModel):
    reduction: str
    mean_improvement: float
    pairs: int


def _mean_sparsity(summaries: Iterable[SummaryRow]) -> dict[str, float]:
    values: dict[str, list[float]] = defaultdict(list)
    for row in summaries:
        if row.status == "ok" and row.sparsity_at_1pct is not None:
            values[row.signal_id].append(row.sparsity_at_1pct)
    return {signal_id: float(np.mean(v)) for signal_id, v in values.items()}


def compare_reductions(summaries: Iterable[SummaryRow]) -> tuple[list[ReductionImprovement], list[ReductionMean]]:
    """
    Improvement in operating-point sparsity from replacing sum by another reduction.

    Signals are matched on (base, pointwise, scaling). Returns every
    matched pair and the mean improvement per alternative reduction.
    """
    triples: dict[str, dict[Reduction, float]] = defaultdict(dict)
    for signal_id, value in _mean_sparsity(summaries).items():
        spec = SignalSpec.from_id(signal_id)
        triples[spec.triple][spec.reduction] = value

    pairs: list[ReductionImprovement] = []
    for triple in sorted(triples):
        by_reduction = triples[triple]
        if Reduction.SUM not in by_reduction:
            continue
        base = by_reduction[Reduction.SUM]
        for reduction in Reduction:
            if reduction == Reduction.SUM or reduction not in by_reduction:
                continue
            pairs.append(ReductionImprovement(
                triple=triple,
                reduction=reduction.value,
                sparsity_sum=base,
                sparsity_alt=by_reduction[reduction],
                improvement=by_reduction[reduction] - base,
            ))
    if not pairs:
        raise PruneTaxError("no signal pairs differing only in sum vs another reduction")

    grouped: dict[str, list[float]] = defaultdict(list)
    for pair in pairs:
        grouped[pair.reduction].append(pair.improvement)
    means = [
        ReductionMean(reduction=r.value, mean_improvement=float(np.mean(grouped[r.value])), pairs=len(grouped[r.value]))
        for r in Reduction
        if r.value in grouped
    ]
    return pairs, means


# =============================================================================
# Retraining effort
# =============================================================================

class RetrainPoint(BaseModel):
    signal_id: str
    sparsity_no_retrain: float
    retrain_steps: float
    sparsity_with_retrain: float


class RetrainReport(BaseModel):
    points: list[RetrainPoint]
    missing: list[str] = Field(default_factory=list)
    spearman: Optional[float] = None
    pvalue: Optional[float] = None


def steps_to_sparsity(rows: Sequence[ExperimentRecord], target: float) -> Optional[int]:
    """Cumulative retraining steps at the first step reaching `target` sparsity."""
    for row in sorted(rows, key=lambda r: r.step):
        if row.sparsity >= target:
            return row.cumulative_retrain_steps
    return None


def retrain_report(
    with_retrain: Iterable[SummaryRow],
    without_retrain: Iterable[SummaryRow],
    min_sparsity: float = 0.0,
    runs: Optional[dict[str, Sequence[ExperimentRecord]]] = None,
) -> RetrainReport:
    """
    Join paired sweeps: sparsity reached without retraining vs retraining steps spent with it.

    Only signals whose retrained operating-point sparsity is at least
    `min_sparsity` are reported. With per-step runs of the retrained
    sweep and a positive `min_sparsity`, the steps are those spent until
    that sparsity was first reached; otherwise the steps up to the
    operating point. Signals without a counterpart in the other sweep are
    listed in `missing` and logged.
    """
    with_retrain = list(with_retrain)
    on = _mean_sparsity(with_retrain)
    off = _mean_sparsity(without_retrain)
    steps_at_point: dict[str, list[float]] = defaultdict(list)
    for row in with_retrain:
        if row.status == "ok":
            steps_at_point[row.signal_id].append(float(row.retrain_steps_at_1pct or 0))

    points: list[RetrainPoint] = []
    missing: list[str] = []
    for signal_id in sorted(on):
        if signal_id not in off:
            logger.warning("%s has no run without retraining; excluded", signal_id)
            missing.append(signal_id)
            continue
        if on[signal_id] < min_sparsity:
            continue
        steps: Optional[float] = None
        if runs is not None and min_sparsity > 0 and signal_id in runs:
            reached = steps_to_sparsity(runs[signal_id], min_sparsity)
            steps = None if reached is None else float(reached)
        if steps is None:
            steps = float(np.mean(steps_at_point[signal_id]))
        points.append(RetrainPoint(
            signal_id=signal_id,
            sparsity_no_retrain=off[signal_id],
            retrain_steps=steps,
            sparsity_with_retrain=on[signal_id],
        ))
    for signal_id in sorted(set(off) - set(on)):
        logger.warning("%s has no run with retraining; excluded", signal_id)
        missing.append(signal_id)

    report = RetrainReport(points=points, missing=missing)
    x = [p.sparsity_no_retrain for p in points]
    y = [p.retrain_steps for p in points]
    if len(points) >= 3 and len(set(x)) > 1 and len(set(y)) > 1:
        result = spearmanr(x, y)
        report.spearman = float(result[0])
        report.pvalue = float(result[1])
    return report


# =============================================================================
# Categories
# =============================================================================

class CategoryBest(BaseModel):
    category: str
    signal_id: str
    sparsity: float
    signals: int


def category_report(summaries: Iterable[SummaryRow]) -> list[CategoryBest]:
    """Best mean operating-point sparsity per information category."""
    best: dict[str, CategoryBest] = {}
    counts: dict[str, int] = defaultdict(int)
    for signal_id, value in sorted(_mean_sparsity(summaries).items()):
        category = SignalSpec.from_id(signal_id).category.value
        counts[category] += 1
        if category not in best or value > best[category].sparsity:
            best[category] = CategoryBest(category=category, signal_id=signal_id, sparsity=value, signals=0)
    return [
        best[c].model_copy(update={"signals": counts[c]})
        for c in ("weights", "outputs", "gradient")
        if c in best
    ]
