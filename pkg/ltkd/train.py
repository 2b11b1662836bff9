"""Two-stage training: one teacher per relational subset, then the distilled unified student."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .data import Dataset
from .distill import KdWeights, TeacherBlock, composite_loss, update_kd_weights
from .errors import CoverageError, EmptyInputError, IntegrityError, ShapeError
from .evaluation import class_scores, per_class_ap
from .models import SubsetSpec, TrainConfig
from .nnet import (
    AdamState,
    MlpNetwork,
    PlateauSchedule,
    adam_step,
    backward,
    derive_seed,
    forward,
    forward_with_cache,
    init_network,
    make_rng,
    network_digest,
    plateau_update,
)

logger = logging.getLogger(__name__)

BatchObjective = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]
EpochHook = Callable[[int, MlpNetwork], None]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TeacherRun:
    subset: SubsetSpec
    model: MlpNetwork
    per_class_val_acc: np.ndarray
    curve: list[EpochRecord] = field(default_factory=list)
    seed: int = 0


@dataclass
class StudentRun:
    kind: Literal["erm", "kd"]
    model: MlpNetwork
    weight_history: list[KdWeights] = field(default_factory=list)
    curve: list[EpochRecord] = field(default_factory=list)


def teacher_seed(master_seed: int, subset_id: int) -> int:
    return derive_seed(master_seed, "teacher", subset_id)


def validation_accuracy(model: MlpNetwork, val: Dataset, who: str) -> np.ndarray:
    """Per-class validation AP; classes without validation positives score 0."""
    values, skipped = per_class_ap(class_scores(model, val), val.labels)
    if skipped:
        logger.warning("%s: classes %s have no validation positives; accuracy recorded as 0",
                       who, [val.class_ids[c] for c in skipped])
    return np.nan_to_num(values, nan=0.0)


def _validation_loss(model: MlpNetwork, val: Dataset, config: TrainConfig) -> float:
    loss, _ = composite_loss(
        forward(model, val.features), val.labels, None, None, 1.0, class_reduction=config.class_reduction
    )
    return loss


def _epoch_order(rng: np.random.Generator, n_instances: int, config: TrainConfig) -> np.ndarray:
    """One shuffled pass, topped up with further passes on datasets too small for min_steps_per_epoch."""
    order = rng.permutation(n_instances)
    wanted = config.min_steps_per_epoch * config.batch_size
    if -(-n_instances // config.batch_size) >= config.min_steps_per_epoch:
        return order
    passes = [order]
    while sum(p.size for p in passes) < wanted:
        passes.append(rng.permutation(n_instances))
    return np.concatenate(passes)[:wanted]


def _optimize(
    net: MlpNetwork,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    seed: int,
    objective: BatchObjective,
    *,
    on_epoch_start: EpochHook | None = None,
    who: str = "model",
) -> tuple[MlpNetwork, list[EpochRecord]]:
    if train.n_instances == 0:
        raise EmptyInputError(f"{who}: no training instances")
    schedule = PlateauSchedule(
        current_lr=config.initial_lr,
        floor_lr=config.lr_floor,
        patience=config.plateau_patience,
        factor=config.plateau_factor,
    )
    state = AdamState.for_network(net)
    rng = make_rng(seed, "shuffle")
    curve: list[EpochRecord] = []

    for epoch in range(config.epochs):
        if on_epoch_start is not None:
            on_epoch_start(epoch, net)
        order = _epoch_order(rng, train.n_instances, config)
        running = 0.0
        for start in range(0, order.size, config.batch_size):
            rows = order[start : start + config.batch_size]
            batch = train.features[rows]
            logits, cache = forward_with_cache(net, batch)
            loss, upstream = objective(rows, batch, logits)
            grads = backward(net, batch, upstream, cache=cache)
            net, state = adam_step(net, grads, state, schedule.current_lr)
            running += loss * rows.size
        val_loss = _validation_loss(net, val, config)
        curve.append(EpochRecord(epoch, schedule.current_lr, running / order.size, val_loss))
        logger.debug("%s epoch %d: train %.5f val %.5f lr %.1e", who, epoch, curve[-1].train_loss, val_loss, schedule.current_lr)
        schedule, stop = plateau_update(schedule, val_loss)
        if stop:
            logger.info("%s: learning rate reached its floor after %d epochs", who, epoch + 1)
            break
    return net, curve


def _bce_objective(train: Dataset, config: TrainConfig) -> BatchObjective:
    def objective(rows: np.ndarray, batch: np.ndarray, logits: np.ndarray) -> tuple[float, np.ndarray]:
        return composite_loss(logits, train.labels[rows], None, None, 1.0, class_reduction=config.class_reduction)

    return objective


def train_teacher(
    subset_train: Dataset,
    subset_val: Dataset,
    spec: SubsetSpec,
    config: TrainConfig,
    seed: int,
) -> TeacherRun:
    if subset_train.class_ids != spec.class_ids or subset_val.class_ids != spec.class_ids:
        raise ShapeError(f"teacher {spec.subset_id}: datasets do not hold exactly the subset classes")
    who = f"teacher {spec.subset_id} ({spec.name})"
    net = init_network([subset_train.d_in, *config.hidden_dims, 2 * len(spec.class_ids)], seed)
    net, curve = _optimize(net, subset_train, subset_val, config, seed, _bce_objective(subset_train, config), who=who)
    accuracy = validation_accuracy(net, subset_val, who)
    accuracy.setflags(write=False)
    logger.info("%s trained for %d epochs; validation AP %s", who, len(curve), np.round(accuracy, 4).tolist())
    return TeacherRun(subset=spec, model=net, per_class_val_acc=accuracy, curve=curve, seed=seed)


def train_teachers(
    subset_trains: Sequence[Dataset],
    subset_vals: Sequence[Dataset],
    specs: Sequence[SubsetSpec],
    config: TrainConfig,
    *,
    max_workers: int = 1,
) -> list[TeacherRun]:
    """Teachers are independent; each draws from its own seed stream, so order does not matter."""
    jobs = list(zip(subset_trains, subset_vals, specs))
    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = [
            pool.submit(train_teacher, tr, va, spec, config, teacher_seed(config.seed, spec.subset_id))
            for tr, va, spec in jobs
        ]
        return [f.result() for f in futures]


def train_student_erm(train: Dataset, val: Dataset, config: TrainConfig) -> StudentRun:
    net = init_network([train.d_in, *config.hidden_dims, 2 * train.n_classes], config.seed)
    net, curve = _optimize(net, train, val, config, config.seed, _bce_objective(train, config), who="erm")
    return StudentRun(kind="erm", model=net, curve=curve)


def teacher_accuracy_vector(teachers: Sequence[TeacherRun], class_ids: Sequence[int]) -> np.ndarray:
    owners: dict[int, float] = {}
    shared: list[int] = []
    for teacher in teachers:
        for c, acc in zip(teacher.subset.class_ids, teacher.per_class_val_acc):
            if c in owners:
                shared.append(c)
            owners[c] = float(acc)
    if shared:
        raise CoverageError(shared, f"classes {sorted(shared)} are owned by more than one teacher")
    orphans = [c for c in class_ids if c not in owners]
    if orphans:
        raise CoverageError(orphans)
    unknown = sorted(set(owners) - set(class_ids))
    if unknown:
        raise CoverageError(unknown, f"teachers cover classes {unknown} unknown to the student")
    return np.array([owners[c] for c in class_ids])


def distill_student(train: Dataset, val: Dataset, teachers: Sequence[TeacherRun], config: TrainConfig) -> StudentRun:
    teacher_acc = teacher_accuracy_vector(teachers, train.class_ids)
    for teacher in teachers:
        if teacher.model.d_in != train.d_in:
            raise ShapeError(
                f"teacher {teacher.subset.subset_id} expects {teacher.model.d_in} features, data has {train.d_in}"
            )
    frozen = [network_digest(t.model) for t in teachers]

    net = init_network([train.d_in, *config.hidden_dims, 2 * train.n_classes], config.seed)
    weights = KdWeights.initial(teacher_acc, config.delta)
    history: list[KdWeights] = []

    def refresh_weights(epoch: int, model: MlpNetwork) -> None:
        nonlocal weights
        student_acc = validation_accuracy(model, val, "student")
        weights = update_kd_weights(weights, student_acc, config.weights_mode)
        history.append(weights)
        logger.debug("epoch %d distillation weights %s", epoch, np.round(weights.weights, 3).tolist())

    def objective(rows: np.ndarray, batch: np.ndarray, logits: np.ndarray) -> tuple[float, np.ndarray]:
        blocks = [TeacherBlock(t.subset.class_ids, forward(t.model, batch)) for t in teachers]
        return composite_loss(
            logits,
            train.labels[rows],
            blocks,
            weights,
            config.temperature,
            class_ids=train.class_ids,
            kl_direction=config.kl_direction,
            t_squared=config.t_squared,
            class_reduction=config.class_reduction,
        )

    net, curve = _optimize(net, train, val, config, config.seed, objective, on_epoch_start=refresh_weights, who="student")

    if [network_digest(t.model) for t in teachers] != frozen:
        raise IntegrityError("teacher parameters changed during distillation")
    return StudentRun(kind="kd", model=net, weight_history=history, curve=curve)
