from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List

from pydantic import ValidationError

from .errors import ConfigurationError
from .models import ExperimentPreset

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "desk_default"


class ExperimentPresetRepository:
    def __init__(self, presets_path: str | Path | None = None) -> None:
        if presets_path:
            self.path = Path(presets_path)
        else:
            self.path = Path(__file__).resolve().parent / "resources" / "experiment_presets.json"
        if not self.path.exists():
            raise FileNotFoundError(f"Experiment presets file not found at {self.path}")
        self._presets = self._load_presets()
        logger.debug("loaded %d experiment presets from %s", len(self._presets), self.path)

    def _load_presets(self) -> Dict[str, ExperimentPreset]:
        data = json.loads(self.path.read_text(encoding="utf-8"))
        loaded: Dict[str, ExperimentPreset] = {}
        for raw in data.get("presets", []):
            try:
                preset = ExperimentPreset(**raw)
            except ValidationError as exc:
                raise ConfigurationError(f"invalid preset '{raw.get('id')}' in {self.path}: {exc}") from exc
            loaded[preset.id] = preset
        return loaded

    def list_presets(self) -> List[ExperimentPreset]:
        return list(self._presets.values())

    def get(self, preset_id: str) -> ExperimentPreset:
        if preset_id not in self._presets:
            raise KeyError(f"Experiment preset '{preset_id}' not found")
        return self._presets[preset_id]
