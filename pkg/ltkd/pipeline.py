"""Stage orchestration behind the ``run`` and ``ablate`` commands."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Sequence

from .config import Settings, get_settings
from .data import DataSplit, Dataset, class_stats, dataset_hash, load_dataset, project, sparse_classes, split
from .errors import DataError, IntegrityError, LtkdError, StageError
from .evaluation import compare_runs, evaluate, group_assignment
from .models import (
    BalanceReport,
    ComparisonArtifact,
    EvalReport,
    ExperimentConfig,
    GroupAssignment,
    Provenance,
    RunManifest,
    SubsetPlan,
    TrainConfig,
)
from .report_generator import ComparisonReportGenerator, slugify
from .run_store import ExperimentRun, save_run, save_teacher
from .subsets import balance_report, build_subsets, materialize_subset, save_plan
from .train import StudentRun, TeacherRun, distill_student, train_student_erm, train_teachers

logger = logging.getLogger(__name__)

BASELINE_DIR = "baseline"
COMPARISON_JSON = "comparison.json"
COMPARISON_TXT = "comparison.txt"
DEFAULT_TEMPERATURES = (3.0, 10.0, 20.0)


@dataclass
class RunResult:
    run_dir: Path
    report: EvalReport
    comparison: ComparisonArtifact
    arms: List[EvalReport] = field(default_factory=list)


@dataclass
class _Prepared:
    dataset: Dataset
    parts: DataSplit
    dataset_hash: str
    groups: GroupAssignment
    sparse: List[int]


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.info("stage %s: started", name)
    try:
        yield
    except StageError:
        raise
    except LtkdError as exc:
        logger.error("stage %s failed: %s", name, exc)
        raise StageError(name, exc) from exc
    except OSError as exc:
        logger.error("stage %s failed on the filesystem: %s", name, exc)
        wrapped = DataError if name == "load" else IntegrityError
        raise StageError(name, wrapped(str(exc))) from exc
    logger.info("stage %s: done", name)


def run_label(train: TrainConfig, *, kd: bool, strategy: str | None = None, tag_temperature: bool = False) -> str:
    if not kd:
        return "erm"
    parts = ["kd"]
    if strategy:
        parts.append(strategy.split("_")[0])
    parts.append(train.weights_mode)
    if tag_temperature:
        parts.append(f"t{train.temperature:g}")
    return "-".join(parts)


class ExperimentService:
    def __init__(self, settings: Settings | None = None) -> None:
        self.settings = settings or get_settings()
        self.reporter = ComparisonReportGenerator()

    def run(self, config: ExperimentConfig, dataset_path: str | Path, output_dir: str | Path) -> RunResult:
        """Teachers, distilled student and an ERM baseline on one dataset, compared on the test split."""
        root = Path(output_dir)
        config = _with_master_seed(config)
        prepared = self._prepare(config, dataset_path)

        erm_report = self._run_erm(config, prepared, root if not config.kd else root / BASELINE_DIR)
        if not config.kd:
            comparison = self._write_comparison([erm_report], root)
            return RunResult(run_dir=root, report=erm_report, comparison=comparison, arms=[erm_report])

        plan, balance, teachers = self._train_teachers(config, prepared, root)
        report = self._run_kd(config, prepared, root, plan, balance, teachers)
        comparison = self._write_comparison([erm_report, report], root)
        return RunResult(run_dir=root, report=report, comparison=comparison, arms=[erm_report, report])

    def ablate(
        self,
        config: ExperimentConfig,
        dataset_path: str | Path,
        output_dir: str | Path,
        temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
    ) -> RunResult:
        """Shared teachers, then ERM, fixed-weight KD per temperature and the dynamic-weight student."""
        root = Path(output_dir)
        config = _with_master_seed(config)
        prepared = self._prepare(config, dataset_path)
        reports = [self._run_erm(config, prepared, root / "erm")]
        plan, balance, teachers = self._train_teachers(config, prepared, root / "shared")

        arms = [config.train.model_copy(update={"weights_mode": "fixed", "temperature": float(t)}) for t in temperatures]
        arms.append(config.train.model_copy(update={"weights_mode": "dynamic"}))
        for train in arms:
            arm = config.model_copy(update={"train": train})
            label = run_label(train, kd=True, tag_temperature=True)
            report = self._run_kd(arm, prepared, root / slugify(label), plan, balance, teachers, label=label)
            reports.append(report)

        comparison = self._write_comparison(reports, root, title="Distillation ablation (mAP)")
        return RunResult(run_dir=root, report=reports[-1], comparison=comparison, arms=reports)

    def _prepare(self, config: ExperimentConfig, dataset_path: str | Path) -> _Prepared:
        with _stage("load"):
            dataset = load_dataset(dataset_path)
            digest = dataset_hash(dataset)
        with _stage("split"):
            parts = split(dataset, config.split_ratios, config.seed)
            groups = group_assignment(class_stats(parts.train))
        logger.info(
            "split %d instances into train %d / val %d / test %d",
            dataset.n_instances, parts.train.n_instances, parts.val.n_instances, parts.test.n_instances,
        )
        return _Prepared(dataset, parts, digest, groups, sparse_classes(dataset, len(config.split_ratios)))

    def _provenance(self, config: ExperimentConfig, prepared: _Prepared) -> Provenance:
        return Provenance(seed=config.seed, config_hash=config.config_hash(), dataset_hash=prepared.dataset_hash)

    def _manifest(self, config: ExperimentConfig, prepared: _Prepared, label: str, kind: str) -> RunManifest:
        return RunManifest(
            run_label=label,
            kind=kind,
            config=config,
            config_hash=config.config_hash(),
            seed=config.seed,
            dataset_hash=prepared.dataset_hash,
            strategy=config.subsets.strategy if kind == "kd" else None,
            sparse_classes=prepared.sparse,
        )

    def _run_erm(self, config: ExperimentConfig, prepared: _Prepared, run_dir: Path) -> EvalReport:
        erm_config = config.model_copy(update={"kd": False})
        with _stage("baseline"):
            student = train_student_erm(prepared.parts.train, prepared.parts.val, erm_config.train)
        with _stage("evaluate"):
            report = evaluate(student.model, prepared.parts.test, prepared.groups, self._provenance(erm_config, prepared), "erm")
        with _stage("save"):
            save_run(
                ExperimentRun(manifest=self._manifest(erm_config, prepared, "erm", "erm"), student=student, report=report),
                run_dir,
            )
        return report

    def _train_teachers(
        self, config: ExperimentConfig, prepared: _Prepared, run_dir: Path
    ) -> tuple[SubsetPlan, BalanceReport, List[TeacherRun]]:
        train_part, val_part = prepared.parts.train, prepared.parts.val
        with _stage("subsets"):
            train_stats = class_stats(train_part)
            plan = build_subsets(train_stats, train_part.class_meta, config.subsets)
            subset_trains = [
                materialize_subset(train_part, spec, config.subsets.negative_fraction, config.seed)
                for spec in plan.subsets
            ]
            subset_vals = [project(val_part, spec.class_ids) for spec in plan.subsets]
            balance = balance_report(
                train_stats, [(spec.subset_id, class_stats(ds)) for spec, ds in zip(plan.subsets, subset_trains)]
            )
            run_dir.mkdir(parents=True, exist_ok=True)
            save_plan(plan, run_dir / "subsets.json")
        logger.info(
            "subset co-occurrence %d (original %d)",
            balance.subset_cooccurrence_mass, balance.original_cooccurrence_mass,
        )

        with _stage("teachers"):
            teachers = train_teachers(
                subset_trains, subset_vals, plan.subsets, config.train, max_workers=self.settings.worker_count
            )
            for teacher in teachers:
                save_teacher(teacher, run_dir, config_hash=config.config_hash())
        return plan, balance, teachers

    def _run_kd(
        self,
        config: ExperimentConfig,
        prepared: _Prepared,
        run_dir: Path,
        plan: SubsetPlan,
        balance: BalanceReport,
        teachers: List[TeacherRun],
        *,
        label: str | None = None,
    ) -> EvalReport:
        label = label or run_label(config.train, kd=True, strategy=config.subsets.strategy)
        with _stage("distill"):
            student: StudentRun = distill_student(prepared.parts.train, prepared.parts.val, teachers, config.train)
        with _stage("evaluate"):
            report = evaluate(student.model, prepared.parts.test, prepared.groups, self._provenance(config, prepared), label)
        with _stage("save"):
            save_run(
                ExperimentRun(
                    manifest=self._manifest(config, prepared, label, "kd"),
                    student=student,
                    report=report,
                    teachers=teachers,
                    plan=plan,
                    balance=balance,
                ),
                run_dir,
            )
        return report

    def _write_comparison(
        self, reports: List[EvalReport], root: Path, *, title: str = "Long-tail mAP comparison"
    ) -> ComparisonArtifact:
        with _stage("compare"):
            artifact = self.reporter.generate(compare_runs(reports), title=title)
            root.mkdir(parents=True, exist_ok=True)
            (root / COMPARISON_JSON).write_text(artifact.payload, encoding="utf-8")
            (root / COMPARISON_TXT).write_text(artifact.content, encoding="utf-8")
        return artifact


def _with_master_seed(config: ExperimentConfig) -> ExperimentConfig:
    """Training draws its streams from the experiment's master seed."""
    if config.train.seed == config.seed:
        return config
    return config.model_copy(update={"train": config.train.model_copy(update={"seed": config.seed})})
