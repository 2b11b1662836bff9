"""Multi-label evaluation: per-class average precision and head/medium/tail group mAP."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .data import ClassStats, Dataset
from .distill import present_probability
from .errors import ComparisonError, ShapeError, UndefinedAPError
from .models import ComparisonRow, ComparisonTable, EvalReport, GroupAssignment, Provenance, ShotBand
from .nnet import MlpNetwork, forward
from .subsets import partition_shot

logger = logging.getLogger(__name__)

BANDS: tuple[ShotBand, ...] = ("head", "medium", "tail")


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Precision averaged at the rank of every positive, no interpolation.

    Ranking is by descending score; equal scores keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    n_positive = int(labels.sum())
    if n_positive == 0:
        raise UndefinedAPError("average precision is undefined without positive labels")
    order = np.lexsort((np.arange(scores.size), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float(np.mean(hits[ranks - 1] / ranks))


def per_class_ap(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """AP per column; columns without positives get NaN and are listed as skipped."""
    values = np.full(labels.shape[1], np.nan)
    skipped: list[int] = []
    for column in range(labels.shape[1]):
        try:
            values[column] = average_precision(scores[:, column], labels[:, column])
        except UndefinedAPError:
            skipped.append(column)
    return values, skipped


def class_scores(model: MlpNetwork, dataset: Dataset) -> np.ndarray:
    if model.n_classes != dataset.n_classes:
        raise ShapeError(
            f"model head holds {model.n_classes} classes, dataset has {dataset.n_classes}"
        )
    logits = forward(model, dataset.features)
    n = model.n_classes
    return present_probability(logits[:, :n], logits[:, n:], 1.0)


def group_assignment(train_stats: ClassStats) -> GroupAssignment:
    bands = partition_shot(train_stats)
    return GroupAssignment(groups={c: BANDS[spec.subset_id] for spec in bands for c in spec.class_ids})


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def report_from_scores(
    scores: np.ndarray,
    dataset: Dataset,
    groups: GroupAssignment,
    provenance: Provenance,
    run_label: str,
) -> EvalReport:
    values, skipped_columns = per_class_ap(scores, dataset.labels)
    class_ids = dataset.class_ids
    skipped = [class_ids[c] for c in skipped_columns]
    if skipped:
        logger.warning("%s: classes %s have no positives in the evaluation split", run_label, skipped)
    per_class = {c: (None if np.isnan(v) else float(v)) for c, v in zip(class_ids, values)}
    scored = [v for v in per_class.values() if v is not None]

    def band_mean(band: ShotBand) -> float | None:
        return _mean([per_class[c] for c in groups.members(band) if per_class.get(c) is not None])

    return EvalReport(
        run_label=run_label,
        class_ids=class_ids,
        per_class_ap=[per_class[c] for c in class_ids],
        map_total=_mean(scored),
        map_head=band_mean("head"),
        map_medium=band_mean("medium"),
        map_tail=band_mean("tail"),
        n_eval_instances=dataset.n_instances,
        skipped_classes=skipped,
        groups=groups,
        provenance=provenance,
    )


def evaluate(
    model: MlpNetwork,
    dataset: Dataset,
    groups: GroupAssignment,
    provenance: Provenance,
    run_label: str = "model",
) -> EvalReport:
    report = report_from_scores(class_scores(model, dataset), dataset, groups, provenance, run_label)
    logger.info(
        "%s: mAP %.4f (head %s, medium %s, tail %s)",
        run_label, report.map_total or 0.0, report.map_head, report.map_medium, report.map_tail,
    )
    return report


def _delta(value: float | None, base: float | None) -> float | None:
    if value is None or base is None:
        return None
    return value - base


def compare_runs(reports: Sequence[EvalReport], baseline_label: str | None = None) -> ComparisonTable:
    """One row per report, with deltas against the baseline (``erm`` when present, else the first)."""
    if not reports:
        raise ComparisonError("nothing to compare")
    hashes = {r.provenance.dataset_hash for r in reports}
    if len(hashes) > 1:
        raise ComparisonError(f"reports come from different datasets: {sorted(hashes)}")
    if any(r.groups != reports[0].groups or r.class_ids != reports[0].class_ids for r in reports):
        raise ComparisonError("reports disagree on classes or head/medium/tail groups")

    labels = [r.run_label for r in reports]
    if baseline_label is None:
        baseline_label = "erm" if "erm" in labels else labels[0]
    if baseline_label not in labels:
        raise ComparisonError(f"baseline '{baseline_label}' is not among {labels}")
    base = reports[labels.index(baseline_label)]

    rows = [
        ComparisonRow(
            run_label=r.run_label,
            head=r.map_head,
            medium=r.map_medium,
            tail=r.map_tail,
            total=r.map_total,
            delta_head=_delta(r.map_head, base.map_head),
            delta_medium=_delta(r.map_medium, base.map_medium),
            delta_tail=_delta(r.map_tail, base.map_tail),
            delta_total=_delta(r.map_total, base.map_total),
            per_class_delta=[_delta(v, b) for v, b in zip(r.per_class_ap, base.per_class_ap)],
        )
        for r in reports
    ]
    return ComparisonTable(
        baseline_label=baseline_label,
        dataset_hash=base.provenance.dataset_hash,
        class_ids=list(base.class_ids),
        rows=rows,
    )
