import csv
import subprocess
import sys

import numpy as np
import pytest

from cliplab import cli, trainer
from cliplab.ratio_ops import TrustRegion, classify_zone, trust_interval


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def only(directory, pattern):
    hits = sorted(directory.glob(pattern))
    assert len(hits) == 1, hits
    return hits[0]


def test_help_lists_every_key_with_provenance(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for k in cli.KEYS:
        assert k.path in text
    assert "[published]" in text and "[artifact]" in text
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    assert "operator.delta = 0.1" in capsys.readouterr().out


def test_analyze_curves(tmp_path):
    assert run("analyze", "--u", 1.28, "--delta", 0.1, "--grid", 200, "--out-dir", tmp_path) == 0
    up = read_csv(only(tmp_path, "analyze_upper_*.csv"))
    low = read_csv(only(tmp_path, "analyze_lower_*.csv"))
    assert len(up) == len(low) == 200
    r = np.array([float(row["r"]) for row in up])
    f = np.array([float(row["f_closed"]) for row in up])
    g = np.array([float(row["g_closed"]) for row in up])
    # nondecreasing except for the single drop just past the bound
    drops = np.flatnonzero(np.diff(f) < 0)
    assert len(drops) == 1 and r[drops[0]] <= 1.28 < r[drops[0] + 1]
    zone = (r > 1.28) & (r < 1.28 / 0.9)
    assert zone.sum() > 5
    # values are written with 12 significant digits
    np.testing.assert_allclose(g[zone] * 0.4 + 0.81, 1.28**2 / r[zone] ** 2, rtol=1e-11)
    assert all(row["f_mc"] == "nan" for row in up)


def test_analyze_monte_carlo_columns(tmp_path):
    assert run("analyze", "--grid", 15, "--r-min", 0.7, "--r-max", 1.45, "--mc-samples", 100_000,
               "--out-dir", tmp_path) == 0
    for side in ("upper", "lower"):
        for row in read_csv(only(tmp_path, f"analyze_{side}_*.csv")):
            se = float(row["f_mc_stderr"])
            assert abs(float(row["f_closed"]) - float(row["f_mc"])) <= max(3 * se, 1e-12)
            gse = float(row["g_mc_stderr"])
            assert abs(float(row["g_closed"]) - float(row["g_mc"])) <= max(3 * gse, 1e-12)


def test_analyze_rejects_bad_grid(tmp_path, capsys):
    assert run("analyze", "--grid", 1, "--out-dir", tmp_path) == 2
    assert run("analyze", "--r-min", 2, "--r-max", 1, "--mc-samples", 10, "--out-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "r_min < r_max" in err and "mc_samples" in err


def _zone_rows(directory, side):
    return read_csv(only(directory, f"zones_{side}_*.csv"))


def test_zones_labels_match_classifier(tmp_path):
    assert run("zones", "--samples", 3000, "--half-width", 0.2, "--out-dir", tmp_path) == 0
    region = TrustRegion()
    for side, sign in (("upper", 1), ("lower", -1)):
        rows = _zone_rows(tmp_path, side)
        assert len(rows) == 3000
        interval = trust_interval(sign, region)
        labels = set()
        for row in rows:
            want = classify_zone(float(row["r_dec"]), float(row["r_exec"]), interval).value
            assert row["zone"] == want
            labels.add(want)
        assert {"Safe", "Rescued", "PushedOut", "DeepViolation"} <= labels


def test_zones_zero_width_on_diagonal(tmp_path):
    assert run("zones", "--samples", 500, "--half-width", 0, "--out-dir", tmp_path) == 0
    for side in ("upper", "lower"):
        rows = _zone_rows(tmp_path, side)
        assert all(row["r_dec"] == row["r_exec"] for row in rows)
        assert {row["zone"] for row in rows} <= {"Safe", "DeepViolation"}


def test_zones_symmetric_geometry(tmp_path):
    assert run("zones", "--samples", 4000, "--r-dist", "uniform", "--out-dir", tmp_path) == 0
    up, low = _zone_rows(tmp_path, "upper"), _zone_rows(tmp_path, "lower")
    for row in up:
        d, e = float(row["r_dec"]), float(row["r_exec"])
        if row["zone"] == "Rescued":
            assert d > 1.28 >= e
        if row["zone"] == "PushedOut":
            assert d <= 1.28 < e
    for row in low:
        d, e = float(row["r_dec"]), float(row["r_exec"])
        if row["zone"] == "Rescued":
            assert d < 0.8 <= e
        if row["zone"] == "PushedOut":
            assert d >= 0.8 > e


def test_zones_rejects_bad_distribution(tmp_path):
    assert run("zones", "--r-sigma", -1, "--out-dir", tmp_path) == 2
    assert run("zones", "--half-width", 1.5, "--out-dir", tmp_path) == 2


def test_train_deterministic_and_thread_independent(tmp_path, capsys):
    args = ["train", "--operator", "nsr", "--delta", 0.1, "--seed", 0, "--steps", 4, "--tasks-per-step", 8]
    assert run(*args, "--out-dir", tmp_path / "a") == 0
    assert run(*args, "--out-dir", tmp_path / "b", "--threads", 2) == 0
    assert run(*args, "--out-dir", tmp_path / "a") == 0  # rerun replaces, never appends
    a = only(tmp_path / "a", "train_*.jsonl")
    b = only(tmp_path / "b", "train_*.jsonl")
    assert a.name == b.name
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 4
    assert "final=" in capsys.readouterr().out


def test_train_single_epoch_never_clips(tmp_path):
    assert run("train", "--operator", "hard", "--inner-epochs", 1, "--steps", 3, "--tasks-per-step", 8,
               "--out-dir", tmp_path) == 0
    from cliplab.metrics import read_records
    assert all(m.clip_fraction == 0 for m in read_records(only(tmp_path, "train_*.jsonl")))


def test_train_requires_steps(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("train", "--out-dir", tmp_path)
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[train]\nsteps = 2\ntasks_per_step = 4\nseed = 5\n[operator]\nkind = "nsr"\n')
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--seed", "7"])
    values, explicit = cli.resolve(args)
    assert values["train.seed"] == 7 and values["train.steps"] == 2 and values["operator.kind"] == "nsr"
    monkeypatch.setenv("CLIPLAB_SEED", "11")
    values, _ = cli.resolve(cli.build_parser().parse_args(["train", "--config", str(cfg)]))
    assert values["train.seed"] == 5
    values, _ = cli.resolve(cli.build_parser().parse_args(["zones"]))
    assert values["zones.seed"] == 11


def test_env_seed_changes_output(tmp_path, monkeypatch):
    monkeypatch.setenv("CLIPLAB_SEED", "3")
    assert run("train", "--steps", 2, "--tasks-per-step", 4, "--out-dir", tmp_path) == 0
    monkeypatch.setenv("CLIPLAB_SEED", "oops")
    assert run("train", "--steps", 2, "--out-dir", tmp_path) == 2
    monkeypatch.delenv("CLIPLAB_SEED")
    assert run("train", "--steps", 2, "--tasks-per-step", 4, "--seed", 3, "--out-dir", tmp_path / "x") == 0
    assert only(tmp_path, "train_*.jsonl").name == only(tmp_path / "x", "train_*.jsonl").name


def test_unknown_keys_reported_with_path(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('[train]\nstepz = 3\nseed = "x"\n[operator]\nkind = "fancy"\n[plots]\na = 1\n')
    assert run("train", "--config", cfg, "--steps", 3) == 2
    err = capsys.readouterr().err
    for fragment in ("train.stepz", "train.seed", "operator.kind", "[plots]"):
        assert fragment in err


def test_invalid_values_listed_together(tmp_path, capsys):
    assert run("train", "--steps", 2, "--delta", 2.0, "--operator", "nsr", "--eps-low", 1.5,
               "--out-dir", tmp_path) == 2
    err = capsys.readouterr().err
    assert "delta" in err and "eps_low" in err


def test_sequence_granularity_defaults():
    values, explicit = cli.resolve(cli.build_parser().parse_args(
        ["train", "--steps", "1", "--operator", "nsr", "--granularity", "sequence"]))
    config = cli.make_train_config(values, explicit)
    assert config.operator.delta == 0.001
    assert (config.region.eps_low, config.region.eps_high) == (3e-4, 4e-4)
    values, explicit = cli.resolve(cli.build_parser().parse_args(
        ["train", "--steps", "1", "--operator", "nsr", "--granularity", "sequence", "--delta", "0.01"]))
    assert cli.make_train_config(values, explicit).operator.delta == 0.01


def test_ablate_single_seed_and_order(tmp_path, capsys):
    cfg = tmp_path / "m.toml"
    cfg.write_text('[ablate]\noperators = ["nsr", "hard", "soft_decay_k3"]\nsteps = 2\n[train]\ntasks_per_step = 4\n')
    assert run("ablate", "--config", cfg, "--seeds", 0, "--out-dir", tmp_path) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()[2:]
    assert [line.split()[0] for line in lines] == ["nsr", "hard", "soft_decay_k3"]
    assert all(line.endswith("+- 0.00") for line in lines)
    rows = read_csv(only(tmp_path, "ablate_*.csv"))
    assert [r["final"] for r in rows if r["seed"] == "sd"] == ["0", "0", "0"]
    assert only(tmp_path, "ablate_*.txt").read_text() == out


def test_ablate_marks_failed_cells(tmp_path, monkeypatch, capsys):
    real = trainer.train

    def flaky(config, *a, **k):
        if config.seed == 1:
            raise trainer.TrainingError("diverged")
        return real(config, *a, **k)

    monkeypatch.setattr(trainer, "train", flaky)
    assert run("ablate", "--seeds", 0, 1, "--steps", 2, "--tasks-per-step", 4, "--out-dir", tmp_path) == 3
    captured = capsys.readouterr()
    assert "error" in captured.out and "diverged" in captured.err
    assert len(captured.out.splitlines()) == 2 + 6


def test_ablate_rejects_unknown_operator(tmp_path):
    assert run("ablate", "--operators", "hard", "magic", "--out-dir", tmp_path) == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("zones", "--samples", 10, "--out-dir", blocker / "sub") == 3
    assert "error" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cliplab", "zones", "--samples", "5", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "zones_upper_" in proc.stdout
