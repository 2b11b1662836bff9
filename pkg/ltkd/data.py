"""Synthetic long-tailed multi-label datasets: generation, statistics, splits and JSON-lines files.

Columns of a dataset are addressed through ``class_meta[*].class_id``. A full dataset uses the
contiguous ids ``0..n-1``; a projected subset keeps the global ids of the classes it holds.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np
from pydantic import ValidationError

from .errors import (
    ConfigurationError,
    DataError,
    DatasetParseError,
    DatasetValidationError,
    DatasetVersionError,
    EmptyInputError,
)
from .models import REGION_ORDER, ClassMeta, GeneratorConfig, canonical_json
from .nnet import make_rng

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
COUNT_TOLERANCE = 0.2


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_meta: tuple[ClassMeta, ...]
    generator_config: GeneratorConfig | None = None
    seed: int | None = None
    _columns: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=bool, copy=True)
        if features.ndim != 2 or labels.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise DatasetValidationError(
                f"features {features.shape} and labels {labels.shape} disagree", instance_index=0
            )
        if labels.shape[1] != len(self.class_meta):
            raise DatasetValidationError(
                f"label width {labels.shape[1]} != {len(self.class_meta)} classes", instance_index=0
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_meta", tuple(self.class_meta))
        object.__setattr__(self, "_columns", {m.class_id: i for i, m in enumerate(self.class_meta)})

    @property
    def n_instances(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_meta)

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])

    @property
    def class_ids(self) -> list[int]:
        return [m.class_id for m in self.class_meta]

    def column_of(self, class_id: int) -> int:
        return self._columns[class_id]

    def positive_ids(self, row: int) -> list[int]:
        return [self.class_meta[c].class_id for c in np.flatnonzero(self.labels[row])]

    def take(self, rows: Sequence[int] | np.ndarray) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            features=self.features[rows],
            labels=self.labels[rows],
            class_meta=self.class_meta,
            generator_config=self.generator_config,
            seed=self.seed,
        )

    def equals(self, other: Dataset) -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and list(self.class_meta) == list(other.class_meta)
            and self.generator_config == other.generator_config
            and self.seed == other.seed
        )


@dataclass(frozen=True, eq=False)
class ClassStats:
    class_ids: list[int]
    counts: np.ndarray
    n_all: int
    sampling_probs: np.ndarray
    cooccurrence: np.ndarray
    imbalance_ratio: float
    cardinality_histogram: dict[str, int]

    @property
    def off_diagonal_cooccurrence(self) -> int:
        """Number of co-occurring class pairs, each unordered pair counted once."""
        return int((self.cooccurrence.sum() - np.trace(self.cooccurrence)) // 2)

    @property
    def probability_gap(self) -> float:
        return float(self.sampling_probs.max() - self.sampling_probs.min())

    def summary(self) -> dict[str, Any]:
        return {
            "n_all": self.n_all,
            "counts": {str(c): int(n) for c, n in zip(self.class_ids, self.counts)},
            "imbalance_ratio": self.imbalance_ratio,
            "cardinality_histogram": dict(self.cardinality_histogram),
        }


class DataSplit(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def target_counts(config: GeneratorConfig) -> list[int]:
    n = config.n_classes
    return [
        int(round(config.head_count * config.imbalance_ratio ** (-i / (n - 1))))
        for i in range(n)
    ]


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def _class_metadata(config: GeneratorConfig, targets: list[int], rng: np.random.Generator) -> list[ClassMeta]:
    n = config.n_classes
    prototypes = _unit_rows(rng.normal(size=(config.n_families, config.d_sig)))
    families = rng.integers(config.n_families, size=n)
    signatures = _unit_rows(prototypes[families] + config.family_spread * rng.normal(size=(n, config.d_sig)))
    regions = rng.integers(len(REGION_ORDER), size=n)
    return [
        ClassMeta(
            class_id=i,
            region_tag=REGION_ORDER[int(regions[i])],
            feature_signature=[float(v) for v in signatures[i]],
            target_count=targets[i],
            family=int(families[i]),
        )
        for i in range(n)
    ]


def affinity_matrix(class_meta: Sequence[ClassMeta]) -> np.ndarray:
    signatures = np.array([m.feature_signature for m in class_meta])
    cosine = signatures @ signatures.T
    regions = np.array([REGION_ORDER.index(m.region_tag) for m in class_meta])
    same_region = (regions[:, None] == regions[None, :]).astype(np.float64)
    affinity = np.clip(np.maximum(cosine, 0.5 * same_region), 0.0, 1.0)
    np.fill_diagonal(affinity, 0.0)
    return affinity


def class_embeddings(config: GeneratorConfig, class_meta: Sequence[ClassMeta]) -> np.ndarray:
    """Per-class signal: the signature written into the class's region block."""
    embeddings = np.zeros((len(class_meta), config.d_in))
    for i, meta in enumerate(class_meta):
        start = REGION_ORDER.index(meta.region_tag) * config.d_sig
        embeddings[i, start : start + config.d_sig] = config.signal_scale * np.asarray(meta.feature_signature)
    return embeddings


def generate_synthetic(config: GeneratorConfig, seed: int) -> Dataset:
    targets = target_counts(config)
    if min(targets) < 1:
        raise ConfigurationError(
            f"imbalance ratio {config.imbalance_ratio} leaves the tail class with zero instances "
            f"at head count {config.head_count}"
        )

    rng = make_rng(seed, "generate")
    class_meta = _class_metadata(config, targets, rng)
    affinity = affinity_matrix(class_meta)
    n = config.n_classes

    # Every label consumes one unit of its class quota, so realized counts equal the targets.
    remaining = np.array(targets, dtype=np.int64)
    rows: list[np.ndarray] = []
    while remaining.sum() > 0:
        primary = int(rng.choice(n, p=remaining / remaining.sum()))
        row = np.zeros(n, dtype=bool)
        row[primary] = True
        remaining[primary] -= 1
        draws = rng.random(n)
        if config.cooccurrence > 0:
            scale = np.minimum(1.0, remaining / max(int(remaining[primary]), 1))
            add_prob = config.cooccurrence * affinity[primary] * scale
            extra = (draws < add_prob) & (remaining > 0)
            extra[primary] = False
            row |= extra
            remaining -= extra.astype(np.int64)
        rows.append(row)

    labels = np.array(rows, dtype=bool)
    signal = labels.astype(np.float64) @ class_embeddings(config, class_meta)
    features = signal + rng.normal(0.0, config.noise, size=signal.shape) if config.noise > 0 else signal

    dataset = Dataset(
        features=features, labels=labels, class_meta=tuple(class_meta), generator_config=config, seed=int(seed)
    )
    realized = labels.sum(axis=0)
    off_target = np.abs(realized - np.array(targets)) > COUNT_TOLERANCE * np.array(targets)
    if off_target.any():
        logger.warning("classes %s drifted beyond tolerance from target counts", np.flatnonzero(off_target).tolist())
    logger.info(
        "generated %d instances over %d classes (head %d, tail %d)",
        dataset.n_instances, n, targets[0], targets[-1],
    )
    return dataset


def class_stats(dataset: Dataset) -> ClassStats:
    if dataset.n_instances == 0:
        raise EmptyInputError("cannot compute class statistics of an empty dataset")
    labels = dataset.labels.astype(np.int64)
    counts = labels.sum(axis=0)
    n_all = dataset.n_instances
    smallest = counts.min()
    ratio = float(counts.max() / smallest) if smallest > 0 else float("inf")
    cardinality = labels.sum(axis=1)
    histogram = {
        "1": int((cardinality == 1).sum()),
        "2": int((cardinality == 2).sum()),
        "3": int((cardinality == 3).sum()),
        "3+": int((cardinality > 3).sum()),
    }
    return ClassStats(
        class_ids=dataset.class_ids,
        counts=counts,
        n_all=n_all,
        sampling_probs=counts / n_all,
        cooccurrence=labels.T @ labels,
        imbalance_ratio=ratio,
        cardinality_histogram=histogram,
    )


def _split_sizes(n_instances: int, ratios: Sequence[float]) -> list[int]:
    raw = [r * n_instances for r in ratios]
    sizes = [int(np.floor(v + 1e-9)) for v in raw]
    leftovers = sorted(range(len(ratios)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in leftovers[: n_instances - sum(sizes)]:
        sizes[k] += 1
    return sizes


def sparse_classes(dataset: Dataset, n_splits: int = 3) -> list[int]:
    counts = dataset.labels.sum(axis=0)
    return [dataset.class_meta[c].class_id for c in np.flatnonzero(counts < n_splits)]


def split(dataset: Dataset, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> DataSplit:
    """Stratified train/val/test split, rarest classes placed first."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positive values summing to 1, got {ratios}")

    n_splits = len(ratios)
    capacity = np.array(_split_sizes(dataset.n_instances, ratios))
    assignment = np.full(dataset.n_instances, -1, dtype=np.int64)
    labels = dataset.labels
    counts = labels.sum(axis=0)
    placed = np.zeros((dataset.n_classes, n_splits), dtype=np.int64)
    rng = make_rng(seed, "split")

    sparse = sparse_classes(dataset, n_splits)
    if sparse:
        logger.warning("classes %s have fewer instances than splits; concentrating them in train", sparse)

    for column in sorted(range(dataset.n_classes), key=lambda c: (counts[c], c)):
        members = rng.permutation(np.flatnonzero(labels[:, column] & (assignment < 0)))
        for index in members:
            open_splits = [k for k in range(n_splits) if capacity[k] > 0]
            if counts[column] < n_splits and capacity[0] > 0:
                chosen = 0
            else:
                feasible = counts[column] >= n_splits
                chosen = max(
                    open_splits,
                    key=lambda k: (
                        feasible and placed[column, k] == 0,
                        ratios[k] * counts[column] - placed[column, k],
                        capacity[k],
                        -k,
                    ),
                )
            assignment[index] = chosen
            capacity[chosen] -= 1
            placed[labels[index], chosen] += 1

    for index in rng.permutation(np.flatnonzero(assignment < 0)):
        chosen = int(np.argmax(capacity))
        assignment[index] = chosen
        capacity[chosen] -= 1

    parts = [dataset.take(np.flatnonzero(assignment == k)) for k in range(n_splits)]
    return DataSplit(*parts)


def project(dataset: Dataset, class_ids: Sequence[int]) -> Dataset:
    """All instances of ``dataset`` with labels restricted to ``class_ids``."""
    missing = [c for c in class_ids if c not in dataset._columns]
    if missing:
        raise ConfigurationError(f"classes {missing} are not part of the dataset")
    columns = [dataset.column_of(c) for c in class_ids]
    return Dataset(
        features=dataset.features,
        labels=dataset.labels[:, columns],
        class_meta=tuple(dataset.class_meta[c] for c in columns),
        generator_config=dataset.generator_config,
        seed=dataset.seed,
    )


def _header(dataset: Dataset) -> dict[str, Any]:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "n_classes": dataset.n_classes,
        "d_in": dataset.d_in,
        "n_instances": dataset.n_instances,
        "class_meta": [m.model_dump(mode="json") for m in dataset.class_meta],
        "generator_config": dataset.generator_config.model_dump(mode="json") if dataset.generator_config else None,
        "seed": dataset.seed,
    }


def dataset_hash(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(canonical_json(_header(dataset)).encode("utf-8"))
    digest.update(np.ascontiguousarray(dataset.features).tobytes())
    digest.update(np.packbits(dataset.labels, axis=None).tobytes())
    return digest.hexdigest()


def save_dataset(dataset: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(dataset)
    if dataset.n_instances:
        header["summary"] = class_stats(dataset).summary()
    with path.open("w", encoding="utf-8") as handle:
        handle.write(json.dumps(header) + "\n")
        for row in range(dataset.n_instances):
            record = {"features": dataset.features[row].tolist(), "labels": dataset.positive_ids(row)}
            handle.write(json.dumps(record) + "\n")
    return path


def _parse_line(text: str, line_number: int) -> dict[str, Any]:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"invalid JSON ({exc.msg})", line_number=line_number) from exc
    if not isinstance(payload, dict):
        raise DatasetParseError("expected a JSON object", line_number=line_number)
    return payload


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_record(
    record: dict[str, Any], index: int, d_in: int, columns: dict[int, int]
) -> tuple[np.ndarray, list[int]]:
    line_number = index + 2
    if "features" not in record or "labels" not in record:
        raise DatasetParseError("record needs 'features' and 'labels'", line_number=line_number)
    row, positive = record["features"], record["labels"]
    if not isinstance(row, list) or not all(_is_number(v) for v in row):
        raise DatasetParseError("'features' must be a list of numbers", line_number=line_number)
    if not isinstance(positive, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in positive):
        raise DatasetParseError("'labels' must be a list of integer class ids", line_number=line_number)
    if len(row) != d_in:
        raise DatasetValidationError(f"{len(row)} features, expected {d_in}", instance_index=index)
    unknown = [c for c in positive if c not in columns]
    if unknown:
        raise DatasetValidationError(
            f"labels {unknown} fall outside the {len(columns)} declared classes", instance_index=index
        )
    return np.asarray(row, dtype=np.float64), [columns[c] for c in positive]


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror or exc}") from exc
    if not lines:
        raise DatasetParseError("missing header", line_number=1)

    header = _parse_line(lines[0], 1)
    version = header.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported dataset format_version {version!r}")
    try:
        class_meta = tuple(ClassMeta(**m) for m in header["class_meta"])
        generator = header.get("generator_config")
        generator_config = GeneratorConfig(**generator) if generator else None
        n_classes = int(header["n_classes"])
        d_in = int(header["d_in"])
        n_instances = int(header["n_instances"])
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise DatasetParseError(f"invalid header: {exc}", line_number=1) from exc
    if len(class_meta) != n_classes:
        raise DatasetParseError("class_meta length does not match n_classes", line_number=1)

    columns = {m.class_id: i for i, m in enumerate(class_meta)}
    body = [line for line in lines[1:] if line.strip()]
    features = np.zeros((len(body), d_in))
    labels = np.zeros((len(body), n_classes), dtype=bool)
    for index, text in enumerate(body):
        features[index], positive = _parse_record(_parse_line(text, index + 2), index, d_in, columns)
        labels[index, positive] = True

    if len(body) != n_instances:
        raise DatasetParseError(
            f"expected {n_instances} instances, found {len(body)} (truncated file?)", line_number=len(body) + 2
        )
    if not np.all(np.isfinite(features)):
        raise DatasetValidationError("non-finite feature values", instance_index=int(np.argwhere(~np.isfinite(features))[0, 0]))
    return Dataset(
        features=features,
        labels=labels,
        class_meta=class_meta,
        generator_config=generator_config,
        seed=header.get("seed"),
    )
