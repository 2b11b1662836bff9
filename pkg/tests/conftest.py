"""Pytest configuration and shared fixtures."""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable, Generator, Sequence

import numpy as np
import pytest

from ltkd.config import get_settings
from ltkd.data import Dataset, generate_synthetic, save_dataset
from ltkd.models import ClassMeta, ExperimentConfig, GeneratorConfig, RegionTag, SubsetConfig, TrainConfig


def unit_signature(index: int, width: int = 4) -> list[float]:
    signature = [0.0] * width
    signature[index % width] = 1.0
    return signature


@pytest.fixture
def small_generator_config() -> GeneratorConfig:
    """Six classes, head 60, ratio 10: every stage runs in well under a second."""
    return GeneratorConfig(
        n_classes=6,
        d_in=16,
        d_sig=4,
        head_count=60,
        imbalance_ratio=10.0,
        cooccurrence=0.3,
        noise=0.3,
        n_families=3,
    )


@pytest.fixture
def small_dataset(small_generator_config: GeneratorConfig) -> Dataset:
    return generate_synthetic(small_generator_config, seed=0)


@pytest.fixture
def fast_train_config() -> TrainConfig:
    return TrainConfig(epochs=3, initial_lr=1e-3, batch_size=32, hidden_dims=[8], seed=0)


@pytest.fixture
def small_experiment_config(small_generator_config: GeneratorConfig, fast_train_config: TrainConfig) -> ExperimentConfig:
    return ExperimentConfig(
        generator=small_generator_config,
        subsets=SubsetConfig(strategy="shot_based", n_feature_groups=2),
        train=fast_train_config,
        seed=0,
    )


@pytest.fixture
def dataset_file(small_dataset: Dataset, temp_dir: Path) -> Path:
    return save_dataset(small_dataset, temp_dir / "dataset.jsonl")


@pytest.fixture
def dataset_factory() -> Callable[..., Dataset]:
    """Build a Dataset from explicit label rows; features default to seeded noise."""

    def build(
        labels: Sequence[Sequence[int]],
        *,
        features: np.ndarray | None = None,
        regions: Sequence[RegionTag] | None = None,
        d_in: int = 4,
    ) -> Dataset:
        label_array = np.asarray(labels, dtype=bool)
        n_classes = label_array.shape[1]
        if features is None:
            features = np.random.default_rng(0).normal(size=(label_array.shape[0], d_in))
        meta = tuple(
            ClassMeta(
                class_id=i,
                region_tag=regions[i] if regions else "global",
                feature_signature=unit_signature(i),
                target_count=max(1, int(label_array[:, i].sum())),
            )
            for i in range(n_classes)
        )
        return Dataset(features=features, labels=label_array, class_meta=meta)

    return build


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch: pytest.MonkeyPatch) -> Generator[None, None, None]:
    """Keep LTKD_* variables from the developer's shell out of every test."""
    for name in ("LTKD_THREADS", "LTKD_LOG_LEVEL", "LTKD_OUTPUT_DIR"):
        monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()
