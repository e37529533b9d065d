"""Per-step diagnostics, JSONL persistence and cross-seed aggregation."""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
from dataclasses import dataclass, field

from .ratio_ops import ZONES

ZONE_KEYS = tuple(z.value for z in ZONES)


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    pass_rate: float
    clip_fraction: float
    zone_counts: dict
    entropy: float
    mean_length: float
    degenerate_groups: int

    def __post_init__(self):
        counts = {k: 0 for k in ZONE_KEYS}
        for k, v in (self.zone_counts or {}).items():
            if k not in counts:
                raise ValueError(f"unknown zone {k!r}")
            counts[k] = int(v)
        self.zone_counts = counts

    def to_json(self) -> str:
        return json.dumps({
            "step": int(self.step),
            "mean_reward": float(self.mean_reward),
            "pass_rate": float(self.pass_rate),
            "clip_fraction": float(self.clip_fraction),
            "zone_counts": {k: self.zone_counts[k] for k in ZONE_KEYS},
            "entropy": float(self.entropy),
            "mean_length": float(self.mean_length),
            "degenerate_groups": int(self.degenerate_groups),
        })

    @classmethod
    def from_json(cls, line: str) -> "StepMetrics":
        return cls(**json.loads(line))


@dataclass
class RunRecord:
    config_hash: str
    per_step: list
    final_pass_rate: float
    initial_pass_rate: float = math.nan
    label: str = ""
    seed: int = 0
    decision_flip_rate: float = 0.0

    @property
    def pass_rates(self) -> list:
        return [m.pass_rate for m in self.per_step]


class MetricsSink:
    """Append-only JSONL writer, flushed after every record."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._last_step = None
        try:
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot open metrics file {self.path}: {exc}") from exc

    def append(self, m: StepMetrics) -> bool:
        if self._last_step is not None and m.step <= self._last_step:
            raise ValueError(f"step {m.step} does not follow step {self._last_step} in {self.path}")
        try:
            self._fh.write(m.to_json() + "\n")
            self._fh.flush()
        except (OSError, ValueError) as exc:
            raise OSError(f"failed writing metrics to {self.path}: {exc}") from exc
        self._last_step = m.step
        return True

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def append_record(sink: MetricsSink, m: StepMetrics) -> bool:
    return sink.append(m)


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [StepMetrics.from_json(line) for line in fh if line.strip()]


@dataclass
class Summary:
    per_run_final: list
    per_run_peak: list
    mean: float
    sd: float
    peak_mean: float = math.nan
    peak_sd: float = math.nan
    labels: list = field(default_factory=list)


def mean_sd(values) -> tuple:
    """Mean and sample (n - 1) standard deviation; SD is 0 for a single value."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no values to aggregate")
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


def summarize(records, window: int = 10) -> Summary:
    """Trailing-window mean of ``pass_rate`` per run, then mean and sample SD across runs."""
    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one run")
    finals, peaks = [], []
    for rec in records:
        rates = rec.pass_rates
        if not 1 <= window <= len(rates):
            raise ValueError(f"window {window} does not fit a run of {len(rates)} steps")
        finals.append(statistics.fmean(rates[-window:]))
        peaks.append(max(rates))
    mean, sd = mean_sd(finals)
    pmean, psd = mean_sd(peaks)
    return Summary(finals, peaks, mean, sd, pmean, psd, [r.label for r in records])


def write_summary_csv(path, rows, footer: bool = True) -> None:
    """Rows of ``(config, seed, final, peak)``; per-config ``mean`` and ``sd`` footer rows."""
    rows = list(rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config", "seed", "final", "peak"])
        for config, seed, final, peak in rows:
            w.writerow([config, seed, _fmt(final), _fmt(peak)])
        if footer and rows:
            for config in dict.fromkeys(r[0] for r in rows):
                finals = [r[2] for r in rows if r[0] == config and math.isfinite(r[2])]
                peaks = [r[3] for r in rows if r[0] == config and math.isfinite(r[3])]
                if not finals:
                    continue
                fm, fs = mean_sd(finals)
                pm, ps = mean_sd(peaks)
                w.writerow([config, "mean", _fmt(fm), _fmt(pm)])
                w.writerow([config, "sd", _fmt(fs), _fmt(ps)])


def _fmt(x) -> str:
    return f"{float(x):.12g}"
