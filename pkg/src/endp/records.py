"""Experiment metric rows and their CSV / JSON persistence.

CSV layout: the base columns in ``BASE_COLUMNS`` order, then one
``acc_<kind>_<level>`` column per evaluated condition (in config order), then
the record's ``extra`` keys in insertion order.  Floats are written with
``repr`` so the CSV round-trips exactly; the JSON file holds the same rows.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

BASE_COLUMNS = ("run_id", "seed", "epoch", "ensemble_size", "nll", "kl", "kl_scale", "total",
                "acc_clean", "var_correct", "var_incorrect", "wall_time_s")
WALL_TIME_COLUMNS = ("wall_time_s", "eval_time_s")


@dataclass
class ExperimentRecord:
    run_id: str
    seed: int
    epoch: int
    ensemble_size: int = 0
    nll: float = math.nan
    kl: float = math.nan
    kl_scale: float = math.nan
    total: float = math.nan
    acc_clean: float = math.nan
    var_correct: float = math.nan
    var_incorrect: float = math.nan
    wall_time_s: float = math.nan
    conditions: dict[str, float] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in [("acc_clean", self.acc_clean), *self.conditions.items()]:
            if not math.isnan(value) and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} is not an accuracy in [0, 1]")
        if not math.isnan(self.wall_time_s) and self.wall_time_s <= 0:
            raise ValueError(f"wall_time_s={self.wall_time_s} must be positive")

    def row(self) -> dict:
        out = {c: getattr(self, c) for c in BASE_COLUMNS}
        out.update(self.conditions)
        out.update(self.extra)
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def columns(records: Sequence[ExperimentRecord]) -> list[str]:
    cols = list(BASE_COLUMNS)
    for r in records:
        for k in list(r.conditions) + list(r.extra):
            if k not in cols:
                cols.append(k)
    return cols


def to_csv(records: Sequence[ExperimentRecord]) -> str:
    cols = columns(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        row = r.row()
        w.writerow([_fmt(row.get(c, "")) for c in cols])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def to_json(records: Sequence[ExperimentRecord]) -> str:
    cols = columns(records)
    rows = [{c: _json_safe(r.row().get(c)) for c in cols} for r in records]
    return json.dumps({"columns": cols, "rows": rows}, indent=1) + "\n"


def write_records(records: Sequence[ExperimentRecord], out_dir, stem: str = "records") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    csv_path.write_text(to_csv(records))
    json_path.write_text(to_json(records))
    return csv_path, json_path


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def strip_wall_time(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in WALL_TIME_COLUMNS} for r in rows]
