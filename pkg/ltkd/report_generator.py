from __future__ import annotations

import json
from typing import List, Optional, Sequence

from .models import ComparisonArtifact, ComparisonTable

BAND_COLUMNS = ("head", "medium", "tail", "total")


class ComparisonReportGenerator:
    def generate(self, table: ComparisonTable, *, title: str = "Long-tail mAP comparison") -> ComparisonArtifact:
        return ComparisonArtifact(
            title=title,
            content=self._build_text(title, table),
            payload=json.dumps(table.model_dump(mode="json"), indent=2, sort_keys=True),
            table=table,
        )

    def _build_text(self, title: str, table: ComparisonTable) -> str:
        header = ["run", *BAND_COLUMNS, *(f"d_{band}" for band in BAND_COLUMNS)]
        body: List[List[str]] = []
        for row in table.rows:
            body.append(
                [
                    row.run_label,
                    *(_fmt(getattr(row, band)) for band in BAND_COLUMNS),
                    *(_fmt(getattr(row, f"delta_{band}"), signed=True) for band in BAND_COLUMNS),
                ]
            )

        lines = [
            title,
            f"baseline: {table.baseline_label}",
            f"dataset:  {table.dataset_hash[:16]}",
            "",
            *_align([header, *body]),
            "",
            "per-class AP change against the baseline",
        ]
        class_header = ["class", *(row.run_label for row in table.rows)]
        class_body = [
            [str(class_id), *(_fmt(row.per_class_delta[i], signed=True) for row in table.rows)]
            for i, class_id in enumerate(table.class_ids)
        ]
        lines.extend(_align([class_header, *class_body]))
        return "\n".join(lines) + "\n"


def _fmt(value: Optional[float], *, signed: bool = False) -> str:
    if value is None:
        return "n/a"
    return f"{value:+.4f}" if signed else f"{value:.4f}"


def _align(rows: Sequence[Sequence[str]]) -> List[str]:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return lines


def slugify(value: str) -> str:
    safe = [char.lower() if char.isalnum() or char == "." else "-" for char in value.strip()]
    result = "".join(safe).strip("-") or "run"
    while "--" in result:
        result = result.replace("--", "-")
    return result
