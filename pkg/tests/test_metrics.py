import csv
import json
import math

import pytest

from cliplab.metrics import (
    MetricsSink,
    RunRecord,
    StepMetrics,
    ZONE_KEYS,
    append_record,
    mean_sd,
    read_records,
    summarize,
    write_summary_csv,
)
from reference_values import STABILITY_TABLE


def step(i, pass_rate=0.5, **zones):
    return StepMetrics(i, 0.4, pass_rate, 0.1, zones, 2.0, 5.5, 0)


def run(rates, label="x"):
    return RunRecord("h", [step(i, p) for i, p in enumerate(rates)], rates[-1], label=label)


def test_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    ms = [step(0, 0.1, Safe=10, Rescued=2), step(1, 0.2), step(5, 0.3, DeepViolation=7)]
    with MetricsSink(path) as sink:
        for m in ms:
            assert append_record(sink, m)
    assert read_records(path) == ms


def test_all_five_zone_keys_serialized():
    obj = json.loads(step(0, Rescued=3).to_json())
    assert list(obj["zone_counts"]) == list(ZONE_KEYS)
    assert obj["zone_counts"] == {"Safe": 0, "Rescued": 3, "PushedOut": 0, "DeepViolation": 0,
                                  "ClippedFallback": 0}
    assert set(obj) == {"step", "mean_reward", "pass_rate", "clip_fraction", "zone_counts", "entropy",
                        "mean_length", "degenerate_groups"}


def test_unknown_zone_rejected():
    with pytest.raises(ValueError):
        step(0, Bogus=1)


def test_steps_must_increase(tmp_path):
    with MetricsSink(tmp_path / "m.jsonl") as sink:
        sink.append(step(3))
        with pytest.raises(ValueError):
            sink.append(step(3))
        with pytest.raises(ValueError):
            sink.append(step(1))


def test_lines_flushed_and_independent(tmp_path):
    path = tmp_path / "m.jsonl"
    sink = MetricsSink(path)
    sink.append(step(0))
    sink.append(step(1))
    # readable before close, as after an abnormal exit
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and all(json.loads(line) for line in lines)
    sink.close()


def test_io_error_mentions_path(tmp_path):
    bad = tmp_path / "missing" / "m.jsonl"
    with pytest.raises(OSError, match="missing"):
        MetricsSink(bad)


def test_summarize_single_run_and_window():
    s = summarize([run([0.1, 0.2, 0.4])], window=1)
    assert s.per_run_final == [0.4] and s.sd == 0.0
    assert summarize([run([0.1, 0.2, 0.4])], window=2).mean == pytest.approx(0.3)
    assert s.per_run_peak == [0.4]


def test_summarize_errors():
    with pytest.raises(ValueError):
        summarize([])
    with pytest.raises(ValueError):
        summarize([run([0.1, 0.2])], window=3)


def test_summarize_example():
    s = summarize([run([37.19]), run([35.10]), run([35.21])], window=1)
    assert s.mean == pytest.approx(35.83, abs=0.005)
    assert s.sd == pytest.approx(1.18, abs=0.005)


@pytest.mark.parametrize("label", list(STABILITY_TABLE))
@pytest.mark.parametrize("metric", ["pass@1", "pass@16"])
def test_stability_table_aggregates(label, metric):
    runs, mean, sd = STABILITY_TABLE[label][metric]
    s = summarize([run([v]) for v in runs], window=1)
    assert abs(s.mean - mean) <= 0.01
    assert abs(s.sd - sd) <= 0.01


def test_mean_sd_uses_sample_deviation():
    m, s = mean_sd([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and s == pytest.approx(math.sqrt(5 / 3))
    assert mean_sd([7.0]) == (7.0, 0.0)


def test_summary_csv(tmp_path):
    path = tmp_path / "s.csv"
    rows = [("hard", 0, 0.5, 0.6), ("hard", 1, 0.7, 0.8), ("nsr", 0, 0.9, 0.9)]
    write_summary_csv(path, rows)
    got = list(csv.reader(path.open()))
    assert got[0] == ["config", "seed", "final", "peak"]
    assert got[1:4] == [["hard", "0", "0.5", "0.6"], ["hard", "1", "0.7", "0.8"], ["nsr", "0", "0.9", "0.9"]]
    assert got[4][:2] == ["hard", "mean"] and float(got[4][2]) == pytest.approx(0.6)
    assert got[5][:2] == ["hard", "sd"] and float(got[5][2]) == pytest.approx(math.sqrt(0.02))
    assert got[7] == ["nsr", "sd", "0", "0"]
