"""Loss mathematics for weighted multi-teacher distillation.

Each class owns a pair of logits ("present", "absent"). Soft targets are the tempered two-way
softmax of that pair; the distillation term is ``KL(student || teacher)`` per class, weighted per
class by the teacher/student accuracy gap, and added to the per-class binary cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, CoverageError, NumericDomainError, ShapeError
from .models import KlDirection, WeightsMode

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12


class SoftTarget(NamedTuple):
    p_present: float
    p_absent: float


class TeacherBlock(NamedTuple):
    """Logits a teacher produced for its ``class_ids`` on one batch, shape ``[B, 2k]``."""

    class_ids: Sequence[int]
    logits: np.ndarray


@dataclass(frozen=True)
class KdWeights:
    weights: np.ndarray
    teacher_acc: np.ndarray
    student_acc: np.ndarray
    delta: float = 0.6

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("weights", "teacher_acc", "student_acc"):
            array = np.array(getattr(self, name), dtype=np.float64, copy=True)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @classmethod
    def initial(cls, teacher_acc: np.ndarray, delta: float) -> KdWeights:
        teacher_acc = np.asarray(teacher_acc, dtype=np.float64)
        return cls(
            weights=np.ones_like(teacher_acc),
            teacher_acc=teacher_acc,
            student_acc=np.zeros_like(teacher_acc),
            delta=delta,
        )


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_FLOOR, PROB_CEIL)


def present_probability(z_present: np.ndarray, z_absent: np.ndarray, temperature: float) -> np.ndarray:
    """Vectorized p_present of the tempered two-way softmax, max-subtracted for stability."""
    a = np.asarray(z_present, dtype=np.float64) / temperature
    b = np.asarray(z_absent, dtype=np.float64) / temperature
    top = np.maximum(a, b)
    ea = np.exp(a - top)
    eb = np.exp(b - top)
    return ea / (ea + eb)


def tempered_binary_softmax(z_present: float, z_absent: float, temperature: float) -> SoftTarget:
    if temperature <= 0 or not np.isfinite(temperature):
        raise ConfigurationError(f"temperature must be finite and positive, got {temperature}")
    p = float(present_probability(z_present, z_absent, temperature))
    return SoftTarget(p_present=p, p_absent=1.0 - p)


def kd_loss(q_hat: SoftTarget, q: SoftTarget) -> float:
    """``sum_o q_hat_o * ln(q_hat_o / q_o)`` with ``0 * ln 0 = 0``."""
    total = 0.0
    for mine, reference in zip(q_hat, q):
        if mine == 0.0:
            continue
        if reference == 0.0:
            raise NumericDomainError("reference probability is zero where the distribution is not")
        total += mine * np.log(mine / reference)
    return max(float(total), 0.0)


def bce_loss(student_soft: SoftTarget, label: int) -> float:
    p = student_soft.p_present if label == 1 else student_soft.p_absent
    return float(-np.log(_clamp(np.float64(p))))


def kd_weight(acc_teacher: float, acc_student: float, delta: float) -> float:
    if acc_teacher <= 0.0:
        logger.warning("teacher accuracy is 0; distillation weight set to 0")
        return 0.0
    if delta * acc_teacher >= acc_student:
        return 1.0
    raw = (acc_teacher - acc_student) / (acc_teacher * (1.0 - delta))
    return float(min(1.0, max(0.0, raw)))


def update_kd_weights(weights: KdWeights, student_acc: np.ndarray, mode: WeightsMode = "dynamic") -> KdWeights:
    student_acc = np.asarray(student_acc, dtype=np.float64)
    teacher_acc = weights.teacher_acc
    if mode in ("fixed", "off"):
        values = np.ones_like(teacher_acc)
    else:
        silent = teacher_acc <= 0.0
        if silent.any():
            logger.warning("classes at columns %s have teacher accuracy 0; weights set to 0", np.flatnonzero(silent).tolist())
        safe = np.where(silent, 1.0, teacher_acc)
        raw = np.clip((safe - student_acc) / (safe * (1.0 - weights.delta)), 0.0, 1.0)
        values = np.where(weights.delta * teacher_acc >= student_acc, 1.0, raw)
        values = np.where(silent, 0.0, values)
    return replace(weights, weights=values, student_acc=student_acc)


def assemble_teacher_logits(blocks: Sequence[TeacherBlock], class_ids: Sequence[int]) -> np.ndarray:
    """Scatter per-teacher ``[B, 2k]`` blocks into the student's ``[B, 2n]`` column layout."""
    column = {c: i for i, c in enumerate(class_ids)}
    n = len(class_ids)
    owners = np.zeros(n, dtype=np.int64)
    assembled: np.ndarray | None = None
    for block in blocks:
        k = len(block.class_ids)
        logits = np.asarray(block.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[1] != 2 * k:
            raise ShapeError(f"teacher block of shape {logits.shape} does not hold {k} class pairs")
        if assembled is None:
            assembled = np.zeros((logits.shape[0], 2 * n))
        elif logits.shape[0] != assembled.shape[0]:
            raise ShapeError("teacher blocks disagree on batch size")
        unknown = [c for c in block.class_ids if c not in column]
        if unknown:
            raise CoverageError(unknown, f"teacher covers classes {unknown} unknown to the student")
        targets = np.array([column[c] for c in block.class_ids], dtype=np.int64)
        owners[targets] += 1
        assembled[:, targets] = logits[:, :k]
        assembled[:, targets + n] = logits[:, k:]
    orphans = [class_ids[i] for i in np.flatnonzero(owners == 0)]
    if orphans:
        raise CoverageError(orphans)
    shared = [class_ids[i] for i in np.flatnonzero(owners > 1)]
    if shared:
        raise CoverageError(shared, f"classes {shared} are owned by more than one teacher")
    assert assembled is not None
    return assembled


def _bce_terms(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-entry BCE ``[B, n]`` and its derivative with respect to the present/absent logits."""
    n = labels.shape[1]
    s = present_probability(logits[:, :n], logits[:, n:], 1.0)
    positive = labels.astype(bool)
    picked = np.where(positive, s, 1.0 - s)
    loss = -np.log(_clamp(picked))
    live = (picked >= PROB_FLOOR) & (picked <= PROB_CEIL)
    # d(-ln s)/dz_p = -(1 - s); d(-ln(1 - s))/dz_p = s; z_a takes the opposite sign
    d_present = np.where(positive, -(1.0 - s), s) * live
    return loss, d_present, -d_present


def _kd_terms(
    logits: np.ndarray, teacher_logits: np.ndarray, temperature: float, direction: KlDirection
) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry KL ``[B, n]`` and its derivative with respect to the student's present logit."""
    n = logits.shape[1] // 2
    s = present_probability(logits[:, :n], logits[:, n:], temperature)
    t = present_probability(teacher_logits[:, :n], teacher_logits[:, n:], temperature)
    s1, s0 = _clamp(s), _clamp(1.0 - s)
    t1, t0 = _clamp(t), _clamp(1.0 - t)
    live1 = (s >= PROB_FLOOR) & (s <= PROB_CEIL)
    live0 = (1.0 - s >= PROB_FLOOR) & (1.0 - s <= PROB_CEIL)

    if direction == "student_teacher":
        kl = s * (np.log(s1) - np.log(t1)) + (1.0 - s) * (np.log(s0) - np.log(t0))
        d_s = (np.log(s1) - np.log(t1)) + live1 - (np.log(s0) - np.log(t0)) - live0
    else:
        kl = t * (np.log(t1) - np.log(s1)) + (1.0 - t) * (np.log(t0) - np.log(s0))
        d_s = -t / s1 * live1 + (1.0 - t) / s0 * live0
    d_present = d_s * s * (1.0 - s) / temperature
    return kl, d_present


def composite_loss(
    student_logits: np.ndarray,
    labels: np.ndarray,
    teacher_logits: np.ndarray | Sequence[TeacherBlock] | None,
    weights: KdWeights | np.ndarray | None,
    temperature: float,
    *,
    class_ids: Sequence[int] | None = None,
    kl_direction: KlDirection = "student_teacher",
    t_squared: bool = False,
    class_reduction: str = "sum",
) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``sum_i bce_i + sum_i w_i * KL_i`` and its gradient w.r.t. the logits.

    ``teacher_logits`` is either the assembled ``[B, 2n]`` array or the per-teacher blocks.
    """
    logits = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels)
    batch, width = logits.shape
    n = width // 2
    if labels.shape != (batch, n):
        raise ShapeError(f"labels of shape {labels.shape} do not match logits {logits.shape}")
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    class_scale = 1.0 if class_reduction == "sum" else 1.0 / n

    bce, d_present, d_absent = _bce_terms(logits, labels)
    loss = float(bce.sum()) * class_scale / batch
    grad = np.concatenate([d_present, d_absent], axis=1) * (class_scale / batch)

    if teacher_logits is None:
        return loss, grad
    if not isinstance(teacher_logits, np.ndarray):
        ids = list(class_ids) if class_ids is not None else list(range(n))
        teacher_logits = assemble_teacher_logits(teacher_logits, ids)
    if teacher_logits.shape != logits.shape:
        raise ShapeError(f"teacher logits {teacher_logits.shape} do not match student {logits.shape}")

    w = weights.weights if isinstance(weights, KdWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"{w.shape[0]} weights for {n} classes")
    if not np.any(w):
        return loss, grad

    kl, d_kl = _kd_terms(logits, teacher_logits, temperature, kl_direction)
    factor = temperature * temperature if t_squared else 1.0
    loss = loss + float((kl * w).sum()) * factor * class_scale / batch
    d_kl = d_kl * w * (factor * class_scale / batch)
    grad = grad + np.concatenate([d_kl, -d_kl], axis=1)
    return loss, grad
