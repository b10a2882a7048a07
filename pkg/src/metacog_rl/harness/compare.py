"""Paired runs of the two rollout modes on shared seeds and data."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from metacog_rl.harness import plotting
from metacog_rl.harness.config import ConfigError, RunConfig
from metacog_rl.harness.metrics import MetricsWriter, report_rows
from metacog_rl.harness.runs import execute

MODES = ("metacog", "dapo-only")
# fields that only say where artifacts go
_NEUTRAL = {"mode", "output_dir", "plots"}

COMPARE_COLUMNS = ("schema_version", "seed", "mode", "step", "valid_groups", "cumulative_valid",
                   "cumulative_batches", "eval_accuracy", "skip")


def check_pair(a: RunConfig, b: RunConfig) -> None:
    if {a.mode, b.mode} != set(MODES):
        raise ConfigError("mode", "a comparison needs one metacog and one dapo-only config")
    for f in dataclasses.fields(RunConfig):
        if f.name not in _NEUTRAL and getattr(a, f.name) != getattr(b, f.name):
            raise ConfigError(f.name, f"configs differ beyond mode ({getattr(a, f.name)!r} vs {getattr(b, f.name)!r})")


def batches_to_reach(series: Sequence[dict], target: float, key: str = "cumulative_valid") -> Optional[int]:
    """Cumulative generated batches at the first step where ``series[key]`` reaches ``target``."""
    for row in series:
        value = row.get(key)
        if value is not None and value >= target:
            return row["cumulative_batches"]
    return None


@dataclass
class SeedComparison:
    seed: int
    series: dict[str, list[dict]]

    def valid(self, mode: str) -> list[int]:
        return [r["valid_groups"] for r in self.series[mode]]


@dataclass
class ComparisonReport:
    seeds: list[SeedComparison]
    targets: tuple[float, ...]
    thresholds: tuple[float, ...]
    files: list[Path] = field(default_factory=list)

    def strictly_more_fraction(self) -> float:
        """Share of (seed, step) pairs where metacog yields more valid groups."""
        wins = total = 0
        for s in self.seeds:
            for a, b in zip(s.valid("metacog"), s.valid("dapo-only")):
                wins += a > b
                total += 1
        return wins / total if total else 0.0

    def fewer_batches(self, target: float) -> int:
        """Seeds where metacog reaches ``target`` valid groups in strictly fewer batches."""
        n = 0
        for s in self.seeds:
            a = batches_to_reach(s.series["metacog"], target)
            b = batches_to_reach(s.series["dapo-only"], target)
            n += a is not None and (b is None or a < b)
        return n

    def batches_to_accuracy(self, threshold: float) -> dict[str, list[Optional[int]]]:
        return {m: [batches_to_reach(s.series[m], threshold, key="eval_accuracy") for s in self.seeds]
                for m in MODES}

    def to_summary(self) -> dict:
        return {
            "schema_version": 1,
            "seeds": [s.seed for s in self.seeds],
            "steps": len(self.seeds[0].series["metacog"]) if self.seeds else 0,
            "strictly_more_valid_fraction": self.strictly_more_fraction(),
            "fewer_batches_to_target": {repr(t): self.fewer_batches(t) for t in self.targets},
            "batches_to_accuracy": {repr(t): self.batches_to_accuracy(t) for t in self.thresholds},
        }

    def rows(self) -> list[dict]:
        return [{"schema_version": 1, "seed": s.seed, "mode": m, **r} for s in self.seeds for m in MODES
                for r in s.series[m]]


def _series(rows: list[dict]) -> list[dict]:
    out, cum = [], 0
    for r in rows:
        valid = sum(r[f"valid_{s}"] for s in ("direct", "decomposition", "reflection"))
        cum += valid
        out.append({"step": r["step"], "valid_groups": valid, "cumulative_valid": cum,
                    "cumulative_batches": r["cumulative_batches"], "eval_accuracy": r["eval_accuracy"],
                    "skip": r["skip"]})
    return out


def compare_modes(a: RunConfig, b: RunConfig, num_seeds: int = 1, targets: Sequence[float] = (),
                  thresholds: Sequence[float] = (), write: bool = True) -> ComparisonReport:
    check_pair(a, b)
    if num_seeds < 1:
        raise ConfigError("num_seeds", "must be positive")
    by_mode = {a.mode: a, b.mode: b}
    targets = tuple(targets) or tuple(float(a.target_groups * m) for m in (1, 5, 10))
    out = Path(a.output_dir)
    writer = MetricsWriter(out, stem="compare", columns=COMPARE_COLUMNS) if write else None
    seeds = []
    try:
        for i in range(num_seeds):
            series = {}
            for mode in MODES:
                cfg = by_mode[mode].replace(seed=by_mode[mode].seed + i)
                result = execute(cfg, train=True, write=False)
                series[mode] = _series(report_rows(result.reports))
            seeds.append(SeedComparison(a.seed + i, series))
        report = ComparisonReport(seeds, targets, tuple(thresholds))
        if writer is not None:
            for row in report.rows():
                writer.write_row(row)
    finally:
        if writer is not None:
            writer.close()
    if write:
        (out / "compare_summary.json").write_text(json.dumps(report.to_summary(), indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
        a.write(out / "config.ini")
        report.files = [out / "compare.jsonl", out / "compare.csv", out / "compare_summary.json", out / "config.ini"]
        if a.plots:
            report.files += plotting.plot_compare(report, out)
    return report
