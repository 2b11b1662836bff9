"""Command-line entry point: ``python -m ltkd {gen-data,run,report,ablate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from .config import get_settings
from .data import class_stats, dataset_hash, generate_synthetic, save_dataset
from .errors import ConfigurationError, LtkdError
from .evaluation import compare_runs
from .models import ExperimentConfig, build_config
from .pipeline import DEFAULT_TEMPERATURES, ExperimentService, RunResult
from .presets import DEFAULT_PRESET, ExperimentPresetRepository
from .report_generator import ComparisonReportGenerator
from .run_store import load_run

logger = logging.getLogger(__name__)


def cmd_gen_data(config: ExperimentConfig, out_path: str | Path) -> Path:
    dataset = generate_synthetic(config.generator, config.seed)
    path = save_dataset(dataset, out_path)
    summary = class_stats(dataset).summary()
    print(f"wrote {dataset.n_instances} instances to {path}")
    print(f"dataset hash: {dataset_hash(dataset)}")
    print(json.dumps(summary, indent=2))
    return path


def cmd_run(config: ExperimentConfig, data_path: str | Path, output_dir: str | Path | None = None) -> RunResult:
    run_dir = Path(output_dir or config.output_dir or get_settings().output_dir)
    result = ExperimentService().run(config, data_path, run_dir)
    print(result.comparison.content, end="")
    print(f"run directory: {result.run_dir}")
    return result


def cmd_report(run_dirs: Sequence[str | Path]) -> str:
    reports = [load_run(directory).report for directory in run_dirs]
    artifact = ComparisonReportGenerator().generate(compare_runs(reports))
    print(artifact.content, end="")
    return artifact.content


def cmd_ablate(
    config: ExperimentConfig,
    data_path: str | Path,
    output_dir: str | Path | None = None,
    temperatures: Sequence[float] = DEFAULT_TEMPERATURES,
) -> RunResult:
    run_dir = Path(output_dir or config.output_dir or get_settings().output_dir)
    result = ExperimentService().ablate(config, data_path, run_dir, temperatures)
    print(result.comparison.content, end="")
    print(f"ablation directory: {result.run_dir}")
    return result


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", default=DEFAULT_PRESET, help="named experiment preset to start from")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", dest="output_dir", help="output path")


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="dataset file written by gen-data")
    parser.add_argument("--strategy", choices=["shot", "region", "feature"])
    parser.add_argument("--temperature", type=float, help="distillation temperature (preset default 10)")
    parser.add_argument("--delta", type=float, help="accuracy-gap threshold of the weight schedule")
    parser.add_argument("--weights", choices=["dynamic", "fixed", "off"])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--negative-fraction", type=float)
    parser.add_argument("--feature-groups", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ltkd", description="Long-tailed multi-label knowledge distillation")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate a synthetic long-tailed multi-label dataset")
    _add_config_flags(gen)
    gen.add_argument("--n-classes", type=int)
    gen.add_argument("--head-count", type=int)
    gen.add_argument("--imbalance-ratio", type=float)
    gen.add_argument("--cooccurrence", type=float)
    gen.add_argument("--noise", type=float)

    run = commands.add_parser("run", help="train teachers, distill the student and compare against ERM")
    _add_config_flags(run)
    _add_training_flags(run)
    run.add_argument("--kd", choices=["on", "off"], default="on")

    report = commands.add_parser("report", help="compare saved run directories")
    report.add_argument("run_dirs", nargs="+")

    ablate = commands.add_parser("ablate", help="temperature and weighting ablation with shared teachers")
    _add_config_flags(ablate)
    _add_training_flags(ablate)
    ablate.add_argument("--temperatures", type=float, nargs="+", default=list(DEFAULT_TEMPERATURES))
    return parser


def _set(section: Dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        section[key] = value


def experiment_config(args: argparse.Namespace, presets: ExperimentPresetRepository | None = None) -> ExperimentConfig:
    presets = presets or ExperimentPresetRepository()
    try:
        base = presets.get(args.preset)
    except KeyError as exc:
        raise ConfigurationError(exc.args[0]) from exc
    values = base.config.model_dump(mode="json")
    generator, train, subsets = values["generator"], values["train"], values["subsets"]

    _set(values, "seed", args.seed)
    _set(values, "output_dir", args.output_dir)
    for flag, key in (
        ("n_classes", "n_classes"),
        ("head_count", "head_count"),
        ("imbalance_ratio", "imbalance_ratio"),
        ("cooccurrence", "cooccurrence"),
        ("noise", "noise"),
    ):
        _set(generator, key, getattr(args, flag, None))
    _set(subsets, "strategy", getattr(args, "strategy", None))
    _set(subsets, "negative_fraction", getattr(args, "negative_fraction", None))
    _set(subsets, "n_feature_groups", getattr(args, "feature_groups", None))
    _set(train, "temperature", getattr(args, "temperature", None))
    _set(train, "delta", getattr(args, "delta", None))
    _set(train, "weights_mode", getattr(args, "weights", None))
    _set(train, "epochs", getattr(args, "epochs", None))
    if getattr(args, "kd", None) is not None:
        values["kd"] = args.kd == "on"
    return build_config(ExperimentConfig, **values)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = get_settings()
        logging.basicConfig(
            level=settings.log_level.upper(),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
        if args.command == "report":
            cmd_report(args.run_dirs)
            return 0
        config = experiment_config(args)
        if args.command == "gen-data":
            cmd_gen_data(config, args.output_dir or "dataset.jsonl")
        elif args.command == "run":
            cmd_run(config, args.data)
        else:
            cmd_ablate(config, args.data, temperatures=args.temperatures)
    except LtkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code
    return 0
