"""Tests for named experiment presets."""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from ltkd.errors import ConfigurationError
from ltkd.models import ExperimentConfig
from ltkd.presets import DEFAULT_PRESET, ExperimentPresetRepository


@pytest.fixture
def presets_file(temp_dir: Path) -> Path:
    path = temp_dir / "presets.json"
    path.write_text(
        json.dumps(
            {
                "presets": [
                    {"id": "tiny", "description": "tiny run", "config": {"train": {"epochs": 1}, "seed": 4}},
                ]
            }
        ),
        encoding="utf-8",
    )
    return path


@pytest.mark.unit
class TestExperimentPresetRepository:
    """Test loading presets from JSON."""

    def test_packaged_presets(self) -> None:
        """The packaged file holds the default and smoke presets."""
        repo = ExperimentPresetRepository()
        ids = [preset.id for preset in repo.list_presets()]
        assert DEFAULT_PRESET in ids
        assert "smoke" in ids

    def test_default_preset_uses_published_schedule(self) -> None:
        """The default preset carries the reference optimizer schedule."""
        config = ExperimentPresetRepository().get(DEFAULT_PRESET).config
        assert config.train.initial_lr == 1e-4
        assert config.train.lr_floor == 1e-7
        assert config.train.delta == 0.6
        assert config.train.temperature == 10.0
        assert config.train.epochs == 100
        assert config.generator.imbalance_ratio == 100.0
        assert config.split_ratios == (0.7, 0.1, 0.2)

    def test_custom_file(self, presets_file: Path) -> None:
        """Presets load from a caller-supplied file."""
        preset = ExperimentPresetRepository(presets_file).get("tiny")
        assert isinstance(preset.config, ExperimentConfig)
        assert preset.config.train.epochs == 1
        assert preset.config.seed == 4

    def test_unknown_preset(self, presets_file: Path) -> None:
        """An unknown preset id raises KeyError."""
        with pytest.raises(KeyError, match="Experiment preset 'missing' not found"):
            ExperimentPresetRepository(presets_file).get("missing")

    def test_missing_file(self, temp_dir: Path) -> None:
        """A missing presets file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            ExperimentPresetRepository(temp_dir / "absent.json")

    def test_invalid_preset(self, temp_dir: Path) -> None:
        """A preset with invalid training values is rejected at load time."""
        path = temp_dir / "bad.json"
        path.write_text(json.dumps({"presets": [{"id": "bad", "config": {"train": {"delta": 2.0}}}]}), encoding="utf-8")
        with pytest.raises(ConfigurationError):
            ExperimentPresetRepository(path)
