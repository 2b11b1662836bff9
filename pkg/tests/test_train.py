"""Tests for teacher training, the ERM baseline and distillation of the unified student."""
from __future__ import annotations

import logging

import numpy as np
import pytest

from ltkd.data import DataSplit, Dataset, class_stats, project, split
from ltkd.errors import CoverageError, IntegrityError, ShapeError
from ltkd.models import SubsetSpec, TrainConfig
from ltkd.nnet import init_network, make_rng, network_digest
from ltkd.subsets import materialize_subset, partition_shot
from ltkd.train import (
    TeacherRun,
    _epoch_order,
    distill_student,
    teacher_seed,
    train_student_erm,
    train_teacher,
    train_teachers,
    validation_accuracy,
)


@pytest.fixture
def parts(small_dataset: Dataset) -> DataSplit:
    return split(small_dataset, seed=0)


@pytest.fixture
def shot_specs(parts: DataSplit) -> list[SubsetSpec]:
    return partition_shot(class_stats(parts.train))


def _subset_data(parts: DataSplit, specs: list[SubsetSpec]) -> tuple[list[Dataset], list[Dataset]]:
    trains = [materialize_subset(parts.train, spec, 0.25, seed=0) for spec in specs]
    vals = [project(parts.val, spec.class_ids) for spec in specs]
    return trains, vals


def _silent_teachers(parts: DataSplit, specs: list[SubsetSpec]) -> list[TeacherRun]:
    """Untrained teachers whose validation accuracy is recorded as 0 everywhere."""
    return [
        TeacherRun(
            subset=spec,
            model=init_network([parts.train.d_in, 4, 2 * len(spec.class_ids)], seed=spec.subset_id),
            per_class_val_acc=np.zeros(len(spec.class_ids)),
        )
        for spec in specs
    ]


@pytest.mark.unit
class TestTrainTeacher:
    """Test single-teacher training."""

    def test_same_inputs_same_teacher(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Identical inputs and seed reproduce the teacher exactly."""
        trains, vals = _subset_data(parts, shot_specs)
        first = train_teacher(trains[0], vals[0], shot_specs[0], fast_train_config, seed=5)
        second = train_teacher(trains[0], vals[0], shot_specs[0], fast_train_config, seed=5)
        assert network_digest(first.model) == network_digest(second.model)
        assert np.array_equal(first.per_class_val_acc, second.per_class_val_acc)
        assert [r.train_loss for r in first.curve] == [r.train_loss for r in second.curve]

    def test_zero_epochs_returns_initial_model(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Zero epochs leave the initialized network untouched."""
        trains, vals = _subset_data(parts, shot_specs)
        config = fast_train_config.model_copy(update={"epochs": 0})
        run = train_teacher(trains[1], vals[1], shot_specs[1], config, seed=9)
        initial = init_network([trains[1].d_in, *config.hidden_dims, 2 * len(shot_specs[1].class_ids)], 9)
        assert network_digest(run.model) == network_digest(initial)
        assert run.curve == []
        assert run.per_class_val_acc.shape == (len(shot_specs[1].class_ids),)

    def test_dataset_must_hold_subset_classes(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """A teacher's data must carry exactly its subset's classes."""
        trains, vals = _subset_data(parts, shot_specs)
        with pytest.raises(ShapeError):
            train_teacher(trains[0], vals[0], shot_specs[1], fast_train_config, seed=0)

    def test_missing_validation_positives_score_zero(self, dataset_factory, caplog: pytest.LogCaptureFixture) -> None:
        """A class with no validation positives scores 0 with a warning."""
        val = dataset_factory([[1, 0], [0, 0], [1, 0]])
        model = init_network([4, 4], seed=0)
        with caplog.at_level(logging.WARNING, logger="ltkd.train"):
            accuracy = validation_accuracy(model, val, "teacher 0")
        assert accuracy[1] == 0.0
        assert "no validation positives" in caplog.text


@pytest.mark.unit
class TestEpochOrder:
    """Test the per-epoch instance order."""

    def test_large_dataset_gets_one_plain_pass(self) -> None:
        """With enough data for the minimum step count the order is a single permutation."""
        config = TrainConfig(batch_size=10, min_steps_per_epoch=3)
        order = _epoch_order(make_rng(0, "shuffle"), 50, config)
        assert np.array_equal(order, make_rng(0, "shuffle").permutation(50))

    def test_small_dataset_is_topped_up_to_minimum_steps(self) -> None:
        """A small dataset is repeated in fresh shuffles until the epoch holds the minimum batch count."""
        config = TrainConfig(batch_size=8, min_steps_per_epoch=5)
        order = _epoch_order(make_rng(0, "shuffle"), 12, config)
        assert order.size == 40
        assert np.array_equal(np.sort(order[:12]), np.arange(12))
        assert np.array_equal(np.sort(order[12:24]), np.arange(12))
        assert np.bincount(order, minlength=12).min() >= 3


@pytest.mark.integration
class TestLearnability:
    def test_separable_pair_of_classes(self, dataset_factory) -> None:
        """A teacher learns two linearly separable classes."""
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, size=(240, 2))
        labels[labels.sum(axis=1) == 0, 0] = 1
        features = np.hstack([2.0 * labels - 1.0, np.zeros((240, 2))]) + rng.normal(scale=0.1, size=(240, 4))
        dataset = dataset_factory(labels, features=features)
        train, val = dataset.take(np.arange(180)), dataset.take(np.arange(180, 240))
        spec = SubsetSpec(subset_id=0, class_ids=[0, 1])
        config = TrainConfig(epochs=100, initial_lr=1e-2, batch_size=32, hidden_dims=[8])
        run = train_teacher(train, val, spec, config, seed=0)
        assert np.all(run.per_class_val_acc > 0.95)


@pytest.mark.unit
class TestTrainTeachers:
    def test_worker_count_does_not_change_results(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Pool size does not change teachers or their order."""
        trains, vals = _subset_data(parts, shot_specs)
        serial = train_teachers(trains, vals, shot_specs, fast_train_config, max_workers=1)
        pooled = train_teachers(trains, vals, shot_specs, fast_train_config, max_workers=3)
        assert [t.subset.subset_id for t in pooled] == [0, 1, 2]
        assert [network_digest(t.model) for t in serial] == [network_digest(t.model) for t in pooled]
        assert [t.seed for t in pooled] == [teacher_seed(fast_train_config.seed, k) for k in range(3)]


@pytest.mark.unit
class TestDistillStudent:
    """Test the second training stage."""

    def test_silent_teachers_reduce_to_erm(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Zero-accuracy teachers leave the student identical to ERM."""
        erm = train_student_erm(parts.train, parts.val, fast_train_config)
        kd = distill_student(parts.train, parts.val, _silent_teachers(parts, shot_specs), fast_train_config)
        assert network_digest(kd.model) == network_digest(erm.model)
        assert all(not snapshot.weights.any() for snapshot in kd.weight_history)
        assert [r.val_loss for r in kd.curve] == [r.val_loss for r in erm.curve]

    def test_teachers_stay_frozen(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Distillation never updates teacher parameters."""
        trains, vals = _subset_data(parts, shot_specs)
        teachers = train_teachers(trains, vals, shot_specs, fast_train_config)
        before = [network_digest(t.model) for t in teachers]
        distill_student(parts.train, parts.val, teachers, fast_train_config)
        assert [network_digest(t.model) for t in teachers] == before

    def test_changed_teacher_is_detected(self, mocker, parts, fast_train_config: TrainConfig) -> None:
        """A teacher digest that changes during distillation is an integrity error."""
        spec = SubsetSpec(subset_id=0, class_ids=parts.train.class_ids)
        mocker.patch("ltkd.train.network_digest", side_effect=["before", "after"])
        with pytest.raises(IntegrityError):
            distill_student(parts.train, parts.val, _silent_teachers(parts, [spec]), fast_train_config)

    def test_weight_history_is_legal(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Logged weights stay in range and are 1 below the threshold."""
        trains, vals = _subset_data(parts, shot_specs)
        teachers = train_teachers(trains, vals, shot_specs, fast_train_config)
        run = distill_student(parts.train, parts.val, teachers, fast_train_config)
        assert len(run.weight_history) == len(run.curve) == fast_train_config.epochs
        for snapshot in run.weight_history:
            assert np.all((snapshot.weights >= 0.0) & (snapshot.weights <= 1.0))
            full = snapshot.delta * snapshot.teacher_acc >= snapshot.student_acc
            assert np.all(snapshot.weights[full & (snapshot.teacher_acc > 0)] == 1.0)

    def test_logged_weights_fall_as_student_accuracy_rises(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Across the logged epochs each class weight is a non-increasing function of student accuracy."""
        trains, vals = _subset_data(parts, shot_specs)
        teachers = train_teachers(trains, vals, shot_specs, fast_train_config)
        config = fast_train_config.model_copy(update={"epochs": 6})
        run = distill_student(parts.train, parts.val, teachers, config)
        student = np.array([s.student_acc for s in run.weight_history])
        weights = np.array([s.weights for s in run.weight_history])
        for column in np.flatnonzero(run.weight_history[0].teacher_acc > 0):
            order = np.argsort(student[:, column], kind="stable")
            assert np.all(np.diff(weights[order, column]) <= 1e-12)

    def test_fixed_weights_stay_at_one(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Fixed mode logs weight 1 for every class and epoch."""
        config = fast_train_config.model_copy(update={"weights_mode": "fixed", "epochs": 2})
        run = distill_student(parts.train, parts.val, _silent_teachers(parts, shot_specs), config)
        assert all(np.array_equal(s.weights, np.ones(parts.train.n_classes)) for s in run.weight_history)

    def test_uncovered_classes(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """Classes no teacher covers are reported."""
        with pytest.raises(CoverageError) as excinfo:
            distill_student(parts.train, parts.val, _silent_teachers(parts, shot_specs[:2]), fast_train_config)
        assert excinfo.value.orphan_ids == shot_specs[2].class_ids

    def test_teacher_input_width_mismatch(self, parts, shot_specs, fast_train_config: TrainConfig) -> None:
        """A teacher with a different input width is rejected."""
        teachers = _silent_teachers(parts, shot_specs)
        teachers[0].model = init_network([parts.train.d_in + 1, 2 * len(shot_specs[0].class_ids)], seed=0)
        with pytest.raises(ShapeError):
            distill_student(parts.train, parts.val, teachers, fast_train_config)
