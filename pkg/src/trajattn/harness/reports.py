"""Machine-readable experiment reports: raw rows plus recomputable aggregates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

__all__ = ["ExperimentReport", "write_rows_csv"]


@dataclass
class ExperimentReport:
    experiment_id: str
    config: dict
    rows: list = field(default_factory=list)

    def add_row(self, **fields_) -> None:
        self.rows.append(fields_)

    def aggregates(self) -> dict:
        """Mean/std/n per numeric column, computed from the raw rows."""
        columns: dict[str, list] = {}
        for row in self.rows:
            for key, val in row.items():
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    continue
                columns.setdefault(key, []).append(float(val))
        out = {}
        for key, vals in columns.items():
            n = len(vals)
            mean = sum(vals) / n
            var = sum((v - mean) ** 2 for v in vals) / n
            out[key] = {"mean": mean, "std": math.sqrt(var), "n": n}
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "experiment_id": self.experiment_id,
                "config": self.config,
                "rows": self.rows,
                "aggregates": self.aggregates(),
            },
            indent=2,
            default=str,
        )

    def write_csv(self, path) -> None:
        write_rows_csv(path, self.rows)


def write_rows_csv(path, rows: list) -> None:
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
