"""Relational subsets: shot-, region- and feature-based class partitions and their datasets."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from .data import ClassStats, Dataset, project
from .errors import ConfigurationError, EmptySubsetError
from .models import (
    REGION_ORDER,
    BalanceReport,
    ClassMeta,
    SubsetBalance,
    SubsetConfig,
    SubsetPlan,
    SubsetSpec,
    SubsetStrategy,
)
from .nnet import make_rng

logger = logging.getLogger(__name__)

SHOT_NAMES = ("many", "medium", "few")


def rank_by_count(stats: ClassStats) -> list[int]:
    """Class ids by descending count, ties broken by ascending class id."""
    return [c for _, c in sorted(zip((-int(n) for n in stats.counts), stats.class_ids))]


def partition_shot(stats: ClassStats, boundaries: tuple[int, int] | None = None) -> list[SubsetSpec]:
    n = len(stats.class_ids)
    if n < 3:
        raise ConfigurationError(f"shot-based subsets need at least 3 classes, got {n}")
    ranked = rank_by_count(stats)
    if boundaries is None:
        bands = [list(b) for b in np.array_split(np.array(ranked), 3)]
    else:
        first, second = boundaries
        if not 0 < first < second < n:
            raise ConfigurationError(f"rank boundaries {boundaries} must satisfy 0 < a < b < {n}")
        bands = [ranked[:first], ranked[first:second], ranked[second:]]

    strategy = SubsetStrategy(
        kind="shot_based", parameters={"boundaries": [len(bands[0]), len(bands[0]) + len(bands[1])]}
    )
    return [
        SubsetSpec(subset_id=k, class_ids=sorted(int(c) for c in band), name=SHOT_NAMES[k], strategy=strategy)
        for k, band in enumerate(bands)
    ]


def group_region(class_meta: Sequence[ClassMeta]) -> list[SubsetSpec]:
    strategy = SubsetStrategy(kind="region_based", parameters={"regions": list(REGION_ORDER)})
    specs: list[SubsetSpec] = []
    for region in REGION_ORDER:
        members = sorted(m.class_id for m in class_meta if m.region_tag == region)
        if members:
            specs.append(SubsetSpec(subset_id=len(specs), class_ids=members, name=region, strategy=strategy))
    return specs


def group_feature(class_meta: Sequence[ClassMeta], n_groups: int) -> list[SubsetSpec]:
    """Average-linkage agglomeration on cosine distance between feature signatures."""
    n = len(class_meta)
    if not 1 <= n_groups <= n:
        raise ConfigurationError(f"n_groups must lie in [1, {n}], got {n_groups}")
    ordered = sorted(class_meta, key=lambda m: m.class_id)
    ids = [m.class_id for m in ordered]

    if n_groups == n:
        clusters = list(range(n))
    elif n_groups == 1:
        clusters = [0] * n
    else:
        signatures = np.array([m.feature_signature for m in ordered])
        tree = linkage(signatures, method="average", metric="cosine")
        clusters = [int(c) for c in cut_tree(tree, n_clusters=n_groups).reshape(-1)]

    members: dict[int, list[int]] = {}
    for class_id, cluster in zip(ids, clusters):
        members.setdefault(cluster, []).append(class_id)
    groups = sorted(members.values(), key=lambda g: g[0])
    strategy = SubsetStrategy(kind="feature_based", parameters={"n_groups": n_groups, "linkage": "average"})
    return [
        SubsetSpec(subset_id=k, class_ids=group, name=f"cluster-{k}", strategy=strategy)
        for k, group in enumerate(groups)
    ]


def check_partition(specs: Sequence[SubsetSpec], class_ids: Sequence[int]) -> None:
    seen: dict[int, int] = {}
    for spec in specs:
        for c in spec.class_ids:
            if c in seen:
                raise ConfigurationError(f"class {c} appears in subsets {seen[c]} and {spec.subset_id}")
            seen[c] = spec.subset_id
    orphans = sorted(set(class_ids) - set(seen))
    extra = sorted(set(seen) - set(class_ids))
    if orphans or extra:
        raise ConfigurationError(f"subsets do not partition the classes (missing {orphans}, unknown {extra})")


def build_subsets(stats: ClassStats, class_meta: Sequence[ClassMeta], config: SubsetConfig) -> SubsetPlan:
    if config.strategy == "shot_based":
        specs = partition_shot(stats, config.shot_boundaries)
    elif config.strategy == "region_based":
        specs = group_region(class_meta)
    else:
        specs = group_feature(class_meta, config.n_feature_groups)
    check_partition(specs, stats.class_ids)
    logger.info(
        "%s strategy produced %d subsets: %s",
        config.strategy, len(specs), [spec.class_ids for spec in specs],
    )
    return SubsetPlan(strategy=specs[0].strategy, subsets=specs)


def materialize_subset(dataset: Dataset, spec: SubsetSpec, negative_fraction: float, seed: int) -> Dataset:
    if not 0.0 <= negative_fraction <= 1.0:
        raise ConfigurationError(f"negative_fraction must lie in [0, 1], got {negative_fraction}")
    projected = project(dataset, spec.class_ids)
    has_positive = projected.labels.any(axis=1)
    positives = np.flatnonzero(has_positive)
    if positives.size == 0:
        raise EmptySubsetError(f"subset {spec.subset_id} ({spec.name}) has no positive instances")

    negatives = np.flatnonzero(~has_positive)
    wanted = min(negatives.size, int(round(negative_fraction * positives.size)))
    if wanted:
        rng = make_rng(seed, "negatives", spec.subset_id)
        negatives = rng.choice(negatives, size=wanted, replace=False)
    else:
        negatives = negatives[:0]
    rows = np.sort(np.concatenate([positives, negatives]))
    return projected.take(rows)


def balance_report(original: ClassStats, subset_stats: Sequence[tuple[int, ClassStats]]) -> BalanceReport:
    entries = [
        SubsetBalance(
            subset_id=subset_id,
            imbalance_ratio=stats.imbalance_ratio,
            probability_gap=stats.probability_gap,
            cooccurrence_mass=stats.off_diagonal_cooccurrence,
            exceeds_original=stats.imbalance_ratio > original.imbalance_ratio,
        )
        for subset_id, stats in subset_stats
    ]
    report = BalanceReport(
        original_imbalance_ratio=original.imbalance_ratio,
        original_probability_gap=original.probability_gap,
        original_cooccurrence_mass=original.off_diagonal_cooccurrence,
        subsets=entries,
    )
    if report.flagged():
        logger.warning("subsets %s are more imbalanced than the original data", report.flagged())
    return report


def save_plan(plan: SubsetPlan, path: str | Path) -> Path:
    path = Path(path)
    payload = {
        "strategy": plan.strategy.kind,
        "parameters": plan.strategy.parameters,
        "subsets": [
            {"subset_id": s.subset_id, "class_ids": s.class_ids, "name": s.name} for s in plan.subsets
        ],
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def load_plan(path: str | Path) -> SubsetPlan:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    strategy = SubsetStrategy(kind=data["strategy"], parameters=data.get("parameters", {}))
    subsets = [SubsetSpec(**raw, strategy=strategy) for raw in data["subsets"]]
    return SubsetPlan(strategy=strategy, subsets=subsets)
