from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
from pydantic import ValidationError

from .distill import KdWeights
from .errors import IntegrityError, PartialRunError
from .models import BalanceReport, EvalReport, RunManifest, SubsetPlan, SubsetSpec, TeacherEntry
from .nnet import load_checkpoint, save_checkpoint
from .subsets import load_plan, save_plan
from .train import EpochRecord, StudentRun, TeacherRun

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STUDENT = "student.json"
WEIGHTS_HISTORY = "weights_history.csv"
CURVES = "curves.csv"
REPORT = "report.json"
SUBSETS = "subsets.json"
BALANCE = "balance.json"

WEIGHT_COLUMNS = ["epoch", "class_id", "acc_teacher", "acc_student", "w"]
CURVE_COLUMNS = ["model", "epoch", "lr", "train_loss", "val_loss"]


@dataclass
class ExperimentRun:
    manifest: RunManifest
    student: StudentRun
    report: EvalReport
    teachers: List[TeacherRun] = field(default_factory=list)
    plan: SubsetPlan | None = None
    balance: BalanceReport | None = None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")


def _teacher_file(subset_id: int) -> str:
    return f"teachers/{subset_id}.json"


def save_teacher(teacher: TeacherRun, directory: str | Path, *, config_hash: str) -> TeacherEntry:
    """Write one teacher checkpoint; the pipeline calls this as soon as teachers finish."""
    name = _teacher_file(teacher.subset.subset_id)
    _write_json(
        Path(directory) / name,
        {
            "subset": teacher.subset.model_dump(mode="json", exclude={"strategy"}),
            "seed": teacher.seed,
            "per_class_val_acc": {
                str(c): float(a) for c, a in zip(teacher.subset.class_ids, teacher.per_class_val_acc)
            },
            "checkpoint": save_checkpoint(teacher.model, config_hash=config_hash),
        },
    )
    return TeacherEntry(subset_id=teacher.subset.subset_id, seed=teacher.seed, file=name)


def save_run(run: ExperimentRun, directory: str | Path) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    config_hash = run.manifest.config_hash
    class_ids = run.report.class_ids
    written: List[str] = []

    if run.plan is not None:
        save_plan(run.plan, root / SUBSETS)
        written.append(SUBSETS)

    if run.balance is not None:
        (root / BALANCE).write_text(run.balance.model_dump_json(indent=2), encoding="utf-8")
        written.append(BALANCE)

    teacher_entries = [save_teacher(teacher, root, config_hash=config_hash) for teacher in run.teachers]
    written.extend(entry.file for entry in teacher_entries)

    _write_json(root / STUDENT, {"kind": run.student.kind, "checkpoint": save_checkpoint(run.student.model, config_hash=config_hash)})
    written.append(STUDENT)

    with (root / WEIGHTS_HISTORY).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(WEIGHT_COLUMNS)
        for epoch, snapshot in enumerate(run.student.weight_history):
            for column, class_id in enumerate(class_ids):
                writer.writerow([
                    epoch,
                    class_id,
                    repr(float(snapshot.teacher_acc[column])),
                    repr(float(snapshot.student_acc[column])),
                    repr(float(snapshot.weights[column])),
                ])
    written.append(WEIGHTS_HISTORY)

    with (root / CURVES).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CURVE_COLUMNS)
        curves = [("student", run.student.curve)] + [
            (f"teacher-{t.subset.subset_id}", t.curve) for t in run.teachers
        ]
        for model, curve in curves:
            for record in curve:
                writer.writerow([model, record.epoch, repr(record.lr), repr(record.train_loss), repr(record.val_loss)])
    written.append(CURVES)

    (root / REPORT).write_text(run.report.model_dump_json(indent=2), encoding="utf-8")
    written.append(REPORT)

    manifest = run.manifest.model_copy(
        update={"teachers": teacher_entries, "files": {name: _sha256(root / name) for name in written}}
    )
    (root / MANIFEST).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    run.manifest = manifest
    logger.info("saved run '%s' to %s", manifest.run_label, root)
    return root


def load_manifest(directory: str | Path) -> RunManifest:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise PartialRunError(MANIFEST)
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise IntegrityError(f"corrupted manifest in {directory}: {exc}") from exc


def _verify_files(root: Path, manifest: RunManifest) -> None:
    for required in (STUDENT, WEIGHTS_HISTORY, CURVES, REPORT):
        if required not in manifest.files:
            raise PartialRunError(required)
    for name, digest in manifest.files.items():
        path = root / name
        if not path.exists():
            raise PartialRunError(name)
        if _sha256(path) != digest:
            raise IntegrityError(f"{name} does not match the digest recorded in the manifest")


def _load_checkpoint(payload: Dict[str, Any], manifest: RunManifest, name: str):
    checkpoint = payload.get("checkpoint") or {}
    if checkpoint.get("config_hash") != manifest.config_hash:
        raise IntegrityError(f"{name} was written under a different configuration")
    return load_checkpoint(checkpoint)


def _read_curves(path: Path) -> Dict[str, List[EpochRecord]]:
    curves: Dict[str, List[EpochRecord]] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            curves.setdefault(row["model"], []).append(
                EpochRecord(int(row["epoch"]), float(row["lr"]), float(row["train_loss"]), float(row["val_loss"]))
            )
    return curves


def _read_weight_history(path: Path, class_ids: List[int], delta: float) -> List[KdWeights]:
    rows: Dict[int, Dict[int, tuple[float, float, float]]] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            rows.setdefault(int(row["epoch"]), {})[int(row["class_id"])] = (
                float(row["acc_teacher"]),
                float(row["acc_student"]),
                float(row["w"]),
            )
    history: List[KdWeights] = []
    for epoch in sorted(rows):
        entries = [rows[epoch][c] for c in class_ids]
        history.append(
            KdWeights(
                teacher_acc=np.array([e[0] for e in entries]),
                student_acc=np.array([e[1] for e in entries]),
                weights=np.array([e[2] for e in entries]),
                delta=delta,
            )
        )
    return history


def load_run(directory: str | Path) -> ExperimentRun:
    root = Path(directory)
    manifest = load_manifest(root)
    _verify_files(root, manifest)

    try:
        report = EvalReport.model_validate_json((root / REPORT).read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise IntegrityError(f"corrupted report in {root}: {exc}") from exc
    curves = _read_curves(root / CURVES)

    teachers: List[TeacherRun] = []
    for entry in manifest.teachers:
        payload = json.loads((root / entry.file).read_text(encoding="utf-8"))
        spec = SubsetSpec(**payload["subset"])
        accuracy = np.array([payload["per_class_val_acc"][str(c)] for c in spec.class_ids])
        accuracy.setflags(write=False)
        teachers.append(
            TeacherRun(
                subset=spec,
                model=_load_checkpoint(payload, manifest, entry.file),
                per_class_val_acc=accuracy,
                curve=curves.get(f"teacher-{entry.subset_id}", []),
                seed=entry.seed,
            )
        )

    student_payload = json.loads((root / STUDENT).read_text(encoding="utf-8"))
    student = StudentRun(
        kind=student_payload["kind"],
        model=_load_checkpoint(student_payload, manifest, STUDENT),
        weight_history=_read_weight_history(root / WEIGHTS_HISTORY, report.class_ids, manifest.config.train.delta),
        curve=curves.get("student", []),
    )
    plan = load_plan(root / SUBSETS) if SUBSETS in manifest.files else None
    balance = (
        BalanceReport.model_validate_json((root / BALANCE).read_text(encoding="utf-8"))
        if BALANCE in manifest.files
        else None
    )
    return ExperimentRun(
        manifest=manifest, student=student, report=report, teachers=teachers, plan=plan, balance=balance
    )
