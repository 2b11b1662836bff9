"""Tests for relational subset construction and materialization."""
from __future__ import annotations

import itertools
from pathlib import Path
from typing import Sequence

import numpy as np
import pytest

from ltkd.data import ClassStats, Dataset, class_stats, generate_synthetic
from ltkd.errors import ConfigurationError, EmptySubsetError
from ltkd.models import ClassMeta, GeneratorConfig, SubsetConfig, SubsetSpec
from ltkd.subsets import (
    balance_report,
    build_subsets,
    check_partition,
    group_feature,
    group_region,
    load_plan,
    materialize_subset,
    partition_shot,
    save_plan,
)


def _stats(counts: Sequence[int]) -> ClassStats:
    counts = np.asarray(counts)
    return ClassStats(
        class_ids=list(range(len(counts))),
        counts=counts,
        n_all=int(counts.sum()),
        sampling_probs=counts / counts.sum(),
        cooccurrence=np.diag(counts),
        imbalance_ratio=float(counts.max() / counts.min()),
        cardinality_histogram={"1": int(counts.sum()), "2": 0, "3": 0, "3+": 0},
    )


def _meta(signatures: Sequence[Sequence[float]], regions: Sequence[str] | None = None) -> list[ClassMeta]:
    unit = [np.asarray(s, dtype=float) / np.linalg.norm(s) for s in signatures]
    return [
        ClassMeta(
            class_id=i,
            region_tag=regions[i] if regions else "global",
            feature_signature=[float(v) for v in vector],
            target_count=1,
        )
        for i, vector in enumerate(unit)
    ]


def _brute_force_average_linkage(signatures: np.ndarray, n_groups: int) -> list[list[int]]:
    """Merge the closest pair of clusters (mean pairwise cosine distance) until n_groups remain."""
    unit = signatures / np.linalg.norm(signatures, axis=1, keepdims=True)
    distance = 1.0 - unit @ unit.T
    clusters = [[i] for i in range(len(signatures))]
    while len(clusters) > n_groups:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            d = np.mean([distance[i, j] for i in clusters[a] for j in clusters[b]])
            if best is None or d < best[0]:
                best = (d, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return sorted(clusters, key=lambda c: c[0])


@pytest.mark.unit
class TestPartitionShot:
    """Test rank tertiles of class counts."""

    def test_tertiles_by_count(self) -> None:
        """Classes split into many, medium and few by count rank."""
        specs = partition_shot(_stats([1000, 500, 100, 50, 10, 5]))
        assert [s.class_ids for s in specs] == [[0, 1], [2, 3], [4, 5]]
        assert [s.name for s in specs] == ["many", "medium", "few"]

    def test_ranking_ignores_class_order(self) -> None:
        """Membership follows counts, not class ids."""
        specs = partition_shot(_stats([5, 1000, 50, 500, 10, 100]))
        assert [s.class_ids for s in specs] == [[1, 3], [2, 5], [0, 4]]

    def test_equal_counts_break_ties_by_class_id(self) -> None:
        """Equal counts are ranked by class id."""
        specs = partition_shot(_stats([7] * 6))
        assert [s.class_ids for s in specs] == [[0, 1], [2, 3], [4, 5]]

    def test_explicit_boundaries(self) -> None:
        """Caller-supplied boundaries override the tertiles."""
        specs = partition_shot(_stats([1000, 500, 100, 50, 10, 5]), (1, 4))
        assert [s.class_ids for s in specs] == [[0], [1, 2, 3], [4, 5]]

    def test_too_few_classes(self) -> None:
        """Fewer classes than tertiles cannot be partitioned."""
        with pytest.raises(ConfigurationError):
            partition_shot(_stats([10, 5]))

    def test_invalid_boundaries(self) -> None:
        """Boundaries must be increasing."""
        with pytest.raises(ConfigurationError):
            partition_shot(_stats([10, 5, 3, 1]), (3, 2))


@pytest.mark.unit
class TestGroupRegion:
    def test_groups_follow_region_roster(self) -> None:
        """Regions become subsets in roster order."""
        meta = _meta([[1, 0]] * 4, ["macula", "macula", "optic_disc", "global"])
        specs = group_region(meta)
        assert [s.class_ids for s in specs] == [[2], [0, 1], [3]]
        assert [s.name for s in specs] == ["optic_disc", "macula", "global"]
        assert [s.subset_id for s in specs] == [0, 1, 2]

    def test_single_region(self) -> None:
        """One region gives one subset."""
        specs = group_region(_meta([[1, 0]] * 3))
        assert [s.class_ids for s in specs] == [[0, 1, 2]]


@pytest.mark.unit
class TestGroupFeature:
    def test_two_orthogonal_families(self) -> None:
        """Two well separated signature families form two groups."""
        signatures = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [1.0, -0.1, 0.05], [0.1, 1.0, -0.1]]
        specs = group_feature(_meta(signatures), 2)
        assert [s.class_ids for s in specs] == [[0, 2], [1, 3]]
        assert [s.class_ids for s in specs] == _brute_force_average_linkage(np.array(signatures), 2)

    def test_matches_brute_force_on_random_signatures(self) -> None:
        """Grouping matches a direct average-linkage merge."""
        signatures = np.random.default_rng(8).normal(size=(7, 5))
        for n_groups in (2, 3, 4):
            specs = group_feature(_meta(signatures), n_groups)
            assert [s.class_ids for s in specs] == _brute_force_average_linkage(signatures, n_groups)

    def test_one_group_per_class(self) -> None:
        """As many groups as classes gives singletons."""
        specs = group_feature(_meta(np.eye(4)), 4)
        assert [s.class_ids for s in specs] == [[0], [1], [2], [3]]

    def test_single_group(self) -> None:
        """One group holds every class."""
        specs = group_feature(_meta(np.eye(4)), 1)
        assert [s.class_ids for s in specs] == [[0, 1, 2, 3]]

    def test_more_groups_than_classes(self) -> None:
        """More groups than classes is rejected."""
        with pytest.raises(ConfigurationError):
            group_feature(_meta(np.eye(3)), 4)


@pytest.mark.unit
class TestBuildSubsets:
    def test_dispatch_accepts_short_strategy_names(self) -> None:
        """A short strategy name dispatches to the full strategy."""
        meta = _meta([[1, 0]] * 4, ["macula", "macula", "optic_disc", "global"])
        plan = build_subsets(_stats([4, 3, 2, 1]), meta, SubsetConfig(strategy="region"))
        assert plan.strategy.kind == "region_based"
        assert plan.owner_of() == {2: 0, 0: 1, 1: 1, 3: 2}

    def test_check_partition_rejects_overlap(self) -> None:
        """A class in two subsets breaks the partition."""
        specs = [SubsetSpec(subset_id=0, class_ids=[0, 1]), SubsetSpec(subset_id=1, class_ids=[1, 2])]
        with pytest.raises(ConfigurationError):
            check_partition(specs, [0, 1, 2])

    def test_check_partition_rejects_orphans(self) -> None:
        """A class in no subset breaks the partition."""
        with pytest.raises(ConfigurationError):
            check_partition([SubsetSpec(subset_id=0, class_ids=[0])], [0, 1])

    def test_plan_file_round_trip(self, temp_dir: Path) -> None:
        """A saved plan loads back with the same subsets and strategy."""
        plan = build_subsets(_stats([1000, 500, 100, 50, 10, 5]), _meta(np.eye(6)), SubsetConfig())
        restored = load_plan(save_plan(plan, temp_dir / "subsets.json"))
        assert [s.class_ids for s in restored.subsets] == [s.class_ids for s in plan.subsets]
        assert restored.strategy == plan.strategy


@pytest.mark.unit
class TestMaterializeSubset:
    def test_cooccurring_head_label_is_dropped(self, dataset_factory) -> None:
        """Labels outside the subset are dropped from kept instances."""
        dataset = dataset_factory([[1, 1], [1, 0], [0, 1]])
        subset = materialize_subset(dataset, SubsetSpec(subset_id=0, class_ids=[1]), 0.0, seed=0)
        assert subset.class_ids == [1]
        assert subset.n_instances == 2
        assert subset.labels.all()
        assert np.array_equal(subset.features, dataset.features[[0, 2]])

    def test_no_negatives_means_every_instance_is_positive(self, small_dataset: Dataset) -> None:
        """Without negatives each kept instance holds a subset label."""
        subset = materialize_subset(small_dataset, SubsetSpec(subset_id=0, class_ids=[3, 4, 5]), 0.0, seed=0)
        assert subset.labels.any(axis=1).all()

    def test_identity_projection(self, small_dataset: Dataset) -> None:
        """A subset of every class without negatives is the dataset itself."""
        spec = SubsetSpec(subset_id=0, class_ids=small_dataset.class_ids)
        assert materialize_subset(small_dataset, spec, 0.0, seed=0).equals(small_dataset)

    def test_negatives_are_sampled_reproducibly(self, dataset_factory) -> None:
        """Negatives are drawn by fraction and seed."""
        dataset = dataset_factory([[1, 0]] * 4 + [[0, 1]] * 6)
        spec = SubsetSpec(subset_id=0, class_ids=[0])
        first = materialize_subset(dataset, spec, 0.5, seed=3)
        second = materialize_subset(dataset, spec, 0.5, seed=3)
        assert first.n_instances == 6
        assert int((~first.labels.any(axis=1)).sum()) == 2
        assert first.equals(second)

    @pytest.mark.parametrize("negative_fraction", [0.0, 0.5, 1.0])
    def test_materializing_twice_changes_nothing(self, small_dataset: Dataset, negative_fraction: float) -> None:
        """Materializing an already materialized subset with the same spec returns it unchanged."""
        spec = SubsetSpec(subset_id=2, class_ids=[4, 5])
        once = materialize_subset(small_dataset, spec, negative_fraction, seed=11)
        twice = materialize_subset(once, spec, negative_fraction, seed=11)
        assert twice.equals(once)

    def test_subset_without_positives(self, dataset_factory) -> None:
        """A subset with no positive instance is an error."""
        dataset = dataset_factory([[1, 0], [1, 0]])
        with pytest.raises(EmptySubsetError):
            materialize_subset(dataset, SubsetSpec(subset_id=1, class_ids=[1]), 0.25, seed=0)


@pytest.mark.unit
class TestBalanceReport:
    def test_single_subset_keeps_original_ratio(self, small_dataset: Dataset) -> None:
        """One subset of everything is not flagged."""
        stats = class_stats(small_dataset)
        report = balance_report(stats, [(0, stats)])
        assert report.subsets[0].imbalance_ratio == stats.imbalance_ratio
        assert not report.flagged()

    def test_singleton_subsets_are_balanced(self, small_dataset: Dataset) -> None:
        """Single-class subsets are perfectly balanced and decoupled."""
        stats = class_stats(small_dataset)
        singles = [
            (c, class_stats(materialize_subset(small_dataset, SubsetSpec(subset_id=c, class_ids=[c]), 0.0, 0)))
            for c in small_dataset.class_ids
        ]
        report = balance_report(stats, singles)
        assert all(entry.imbalance_ratio == 1.0 for entry in report.subsets)
        assert report.subset_cooccurrence_mass == 0


@pytest.mark.integration
class TestStrategiesOnDefaultData:
    """Partition and decoupling properties on the 20-class default generator."""

    @pytest.fixture(scope="class")
    def default_dataset(self) -> Dataset:
        return generate_synthetic(GeneratorConfig(), seed=0)

    @pytest.mark.parametrize("strategy", ["shot_based", "region_based", "feature_based"])
    def test_partition_and_decoupling(self, default_dataset: Dataset, strategy: str) -> None:
        """Every strategy partitions the classes and reduces co-occurrence."""
        stats = class_stats(default_dataset)
        plan = build_subsets(stats, default_dataset.class_meta, SubsetConfig(strategy=strategy))
        check_partition(plan.subsets, default_dataset.class_ids)

        materialized = [
            (spec.subset_id, class_stats(materialize_subset(default_dataset, spec, 0.25, seed=0)))
            for spec in plan.subsets
        ]
        report = balance_report(stats, materialized)
        assert report.subset_cooccurrence_mass <= report.original_cooccurrence_mass
        if strategy == "shot_based":
            assert all(entry.imbalance_ratio <= stats.imbalance_ratio for entry in report.subsets)
            assert all(entry.imbalance_ratio < 100.0 for entry in report.subsets)
