"""Per-step metrics as line-delimited JSON and a CSV table with identical content."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

from metacog_rl.rollout import StepReport
from metacog_rl.types import STAGES

SCHEMA_VERSION = 1

COLUMNS = (
    "schema_version",
    "step",
    "skip",
    *(f"generated_{s.value}" for s in STAGES),
    *(f"valid_{s.value}" for s in STAGES),
    *(f"correct_{s.value}" for s in STAGES),
    "occupancy",
    "fill_rounds",
    "cumulative_batches",
    "eval_accuracy",
    "dapo_loss",
    "sft_loss",
    "loss",
    "sft_pairs",
    "metabuffer_size",
)


class MetricsPathError(OSError):
    pass


def _mean(xs: Sequence[float]) -> Optional[float]:
    return sum(xs) / len(xs) if xs else None


def report_rows(reports: Iterable[StepReport]) -> list[dict]:
    """Flatten step reports; losses are averaged over the inner iterations."""
    rows = []
    cumulative = 0
    for r in reports:
        cumulative += r.fill_rounds
        row = {"schema_version": SCHEMA_VERSION, "step": r.step, "skip": r.skip}
        for s in STAGES:
            row[f"generated_{s.value}"] = r.generated_groups[s.value]
        for s in STAGES:
            row[f"valid_{s.value}"] = r.valid_groups[s.value]
        for s in STAGES:
            row[f"correct_{s.value}"] = r.correct_samples[s.value]
        row.update(
            occupancy=r.occupancy,
            fill_rounds=r.fill_rounds,
            cumulative_batches=cumulative,
            eval_accuracy=r.eval_accuracy,
            dapo_loss=_mean(r.dapo_losses),
            sft_loss=_mean(r.sft_losses),
            loss=_mean(r.losses),
            sft_pairs=r.sft_pairs,
            metabuffer_size=r.metabuffer_size,
        )
        rows.append(row)
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(rows: Sequence[dict], columns: Sequence[str] = COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def jsonl_text(rows: Sequence[dict], columns: Sequence[str] = COLUMNS) -> str:
    return "".join(json.dumps({c: row.get(c) for c in columns}) + "\n" for row in rows)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class MetricsWriter:
    """Streams rows to ``metrics.jsonl`` and ``metrics.csv`` under ``out_dir``.

    Both files are opened (and truncated) up front so an unwritable path fails
    before any work is done.
    """

    def __init__(self, out_dir: str | Path, stem: str = "metrics", columns: Sequence[str] = COLUMNS):
        self.out_dir = Path(out_dir)
        self.columns = tuple(columns)
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._json = open(self.out_dir / f"{stem}.jsonl", "w", encoding="utf-8", newline="\n")
            self._csv = open(self.out_dir / f"{stem}.csv", "w", encoding="utf-8", newline="")
        except OSError as exc:
            raise MetricsPathError(f"cannot write metrics under {self.out_dir}: {exc.strerror or exc}") from exc
        self._writer = csv.writer(self._csv, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._csv.flush()
        self.rows = 0

    def write_row(self, row: dict) -> None:
        self._json.write(json.dumps({c: row.get(c) for c in self.columns}) + "\n")
        self._writer.writerow([_cell(row.get(c)) for c in self.columns])
        self._json.flush()
        self._csv.flush()
        self.rows += 1

    def close(self) -> None:
        self._json.close()
        self._csv.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class ReportStream:
    """Adapter from StepReport callbacks to a MetricsWriter, tracking cumulative batches."""

    def __init__(self, writer: MetricsWriter):
        self.writer = writer
        self.cumulative = 0
        self.rows: list[dict] = []

    def __call__(self, report: StepReport) -> None:
        row = report_rows([report])[0]
        self.cumulative += report.fill_rounds
        row["cumulative_batches"] = self.cumulative
        self.rows.append(row)
        self.writer.write_row(row)
