"""Command-line entry point: ``analyze``, ``train``, ``ablate`` and ``zones``.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then command-line flags. ``CLIPLAB_SEED`` supplies the seed
when neither the file nor a flag sets one. Every output file lands in
``--out-dir`` and carries the hash of the resolved settings in its name.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .advantage import AdvantageMode
from .expectation import RescueProfile, curve_rows, write_curve_csv
from .metrics import MetricsSink, summarize, write_summary_csv
from .ratio_ops import ZONES, ClipOperator, OperatorKind, ProbeMode, TrustRegion, classify_zones
from .surrogate import Granularity
from .trainer import TrainConfig, format_table, run_matrix, train

log = logging.getLogger("cliplab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# defaults applied to sequence granularity unless set explicitly
SEQUENCE_DELTA = 0.001
SEQUENCE_EPS = (3e-4, 4e-4)

ABLATION_OPERATORS = ["hard", "binary", "soft_decay_k2", "soft_decay_k3", "soft_decay_k4", "nsr"]


class ConfigError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    default: Any
    kind: type  # int, float, str, bool or list
    note: str
    source: str = "artifact"  # "published" when the value follows the published setup
    choices: Optional[tuple] = None
    flag: Optional[str] = None
    item: type = int  # element type for list keys

    @property
    def path(self) -> str:
        return f"{self.section}.{self.name}"

    @property
    def option(self) -> str:
        return self.flag or "--" + self.name.replace("_", "-")


KEYS = [
    Key("operator", "kind", "hard", str, "boundary operator", choices=tuple(k.value for k in OperatorKind),
        flag="--operator"),
    Key("operator", "delta", 0.1, float, "rescue half-width for nsr/binary (0.001 at sequence granularity)",
        "published"),
    Key("operator", "k", 2, int, "soft-decay exponent", "published"),
    Key("operator", "probe_mode", "coupled", str, "noise-probe variant", choices=tuple(m.value for m in ProbeMode)),
    Key("operator", "probe_range", 0.2, float, "noise-probe half-width"),
    Key("region", "eps_low", 0.2, float, "lower clip width (3e-4 at sequence granularity)", "published"),
    Key("region", "eps_high", 0.28, float, "upper clip width (4e-4 at sequence granularity)", "published"),
    Key("train", "steps", None, int, "training steps (required by train)"),
    Key("train", "seed", 0, int, "run seed; falls back to CLIPLAB_SEED"),
    Key("train", "group_size", 8, int, "responses per task"),
    Key("train", "tasks_per_step", 32, int, "tasks sampled per step"),
    Key("train", "inner_epochs", 4, int, "SGD passes per batch"),
    Key("train", "learning_rate", 10.0, float, "SGD step size on the logit table", flag="--lr"),
    Key("train", "advantage_mode", "normalized", str, "advantage estimator",
        choices=(AdvantageMode.NORMALIZED.value, AdvantageMode.RAW_BINARY.value)),
    Key("train", "advantage_noise", 0.0, float, "multiplicative advantage noise half-width (0 = off)"),
    Key("train", "granularity", "token", str, "ratio granularity", choices=tuple(g.value for g in Granularity)),
    Key("train", "dynamic_sampling", True, bool, "resample groups until rewards are mixed", "published"),
    Key("train", "max_resample", 20, int, "group draws before tagging a group degenerate"),
    Key("train", "difficulty", 1, int, "verifier family", choices=(0, 1, 2)),
    Key("train", "vocab_size", 16, int, "tokens, including the end token"),
    Key("train", "max_len", 12, int, "maximum response length"),
    Key("train", "context_order", 1, int, "0 = unigram, 1 = bigram policy", choices=(0, 1)),
    Key("train", "eos", True, bool, "use the last token as an end token"),
    Key("analyze", "u", 1.28, float, "upper bound 1 + eps_high", "published"),
    Key("analyze", "l", 0.8, float, "lower bound 1 - eps_low", "published"),
    Key("analyze", "delta", 0.1, float, "rescue half-width", "published"),
    Key("analyze", "r_min", 0.5, float, "first grid ratio"),
    Key("analyze", "r_max", 1.6, float, "last grid ratio"),
    Key("analyze", "grid", 200, int, "grid points"),
    Key("analyze", "mc_samples", 0, int, "Monte Carlo draws per grid point (0 = closed form only)"),
    Key("analyze", "seed", 0, int, "Monte Carlo seed; falls back to CLIPLAB_SEED"),
    Key("ablate", "seeds", [0, 1, 2], list, "seeds per operator"),
    Key("ablate", "operators", list(ABLATION_OPERATORS), list, "operator labels in table order", item=str),
    Key("ablate", "steps", 300, int, "training steps per cell"),
    Key("zones", "samples", 10_000, int, "pairs per bound side"),
    Key("zones", "r_dist", "lognormal", str, "decision-ratio distribution", choices=("lognormal", "uniform")),
    Key("zones", "r_sigma", 0.3, float, "log-scale spread for lognormal"),
    Key("zones", "r_low", 0.5, float, "lower end for uniform"),
    Key("zones", "r_high", 1.6, float, "upper end for uniform"),
    Key("zones", "half_width", 0.1, float, "z ~ U(1 - hw, 1 + hw)", "published"),
    Key("zones", "seed", 0, int, "sampling seed; falls back to CLIPLAB_SEED"),
    Key("output", "out_dir", "out", str, "directory for all outputs"),
    Key("output", "window", 10, int, "trailing steps averaged into a run's final pass rate"),
]
KEY_BY_PATH = {k.path: k for k in KEYS}
SECTIONS = tuple(dict.fromkeys(k.section for k in KEYS))

# sections whose keys become flags on each command
COMMAND_SECTIONS = {
    "analyze": ("analyze", "output"),
    "train": ("operator", "region", "train", "output"),
    "ablate": ("operator", "region", "train", "ablate", "output"),
    "zones": ("region", "zones", "output"),
}
COMMAND_HELP = {
    "analyze": "write expected-ratio and gradient curves for both bounds",
    "train": "train one configuration and write per-step metrics",
    "ablate": "run the operator-by-seed matrix and write the stability table",
    "zones": "sample (decision, execution) ratio pairs labelled by zone",
}


def key_listing() -> str:
    lines = ["config keys (TOML section.key = default  [provenance]  description):"]
    for k in KEYS:
        default = "required" if k.default is None else json.dumps(k.default)
        extra = f" one of {', '.join(map(str, k.choices))};" if k.choices else ""
        lines.append(f"  {k.path} = {default}  [{k.source}]{extra} {k.note}")
    lines.append("published: follows the published training setup; artifact: chosen for the tabular task.")
    lines.append("exit codes: 0 success, 2 config error, 3 runtime error")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cliplab", description="Boundary-operator experiments for clipped policy optimization.",
        epilog=key_listing(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, sections in COMMAND_SECTIONS.items():
        p = sub.add_parser(command, help=COMMAND_HELP[command], description=COMMAND_HELP[command],
                           epilog=key_listing(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(subparser=p)
        p.add_argument("--config", type=Path, help="TOML file with the sections listed below")
        p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")
        p.add_argument("-v", "--verbose", action="store_true")
        for k in KEYS:
            if k.section not in sections:
                continue
            if command == "ablate" and k.path in ("train.steps", "train.seed", "operator.kind"):
                continue  # the matrix sets these per cell
            kwargs = {"dest": k.path, "default": None, "help": f"{k.note} [{k.path}]"}
            if k.kind is bool:
                kwargs["action"] = argparse.BooleanOptionalAction
            elif k.kind is list:
                kwargs.update(type=k.item, nargs="+", metavar=k.name.upper().rstrip("S"))
            else:
                kwargs.update(type=k.kind, metavar=k.name.upper())
                if k.choices:
                    kwargs.update(choices=k.choices, metavar=None)
            p.add_argument(k.option, **kwargs)
    return parser


# configuration resolution


def _type_ok(k: Key, value) -> bool:
    if k.kind is bool:
        return isinstance(value, bool)
    if k.kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if k.kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if k.kind is list:
        return isinstance(value, list) and all(_type_ok(Key("", "", None, k.item, ""), v) for v in value)
    return isinstance(value, k.kind)


def load_config_file(path: Path) -> dict:
    """Flatten a TOML file to ``{"section.key": value}``, rejecting unknown or mistyped keys."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror or exc}"]) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: invalid TOML: {exc}"]) from exc
    flat, problems = {}, []
    for section, body in data.items():
        if section not in SECTIONS:
            problems.append(f"{path}: unknown section [{section}]")
            continue
        if not isinstance(body, dict):
            problems.append(f"{path}: {section} must be a table")
            continue
        for name, value in body.items():
            k = KEY_BY_PATH.get(f"{section}.{name}")
            if k is None:
                problems.append(f"{path}: unknown key {section}.{name}")
            elif not _type_ok(k, value):
                problems.append(f"{path}: {k.path} must be {k.kind.__name__}, got {value!r}")
            elif k.choices and value not in k.choices:
                problems.append(f"{path}: {k.path} must be one of {list(k.choices)}, got {value!r}")
            else:
                flat[k.path] = float(value) if k.kind is float else value
    if problems:
        raise ConfigError(problems)
    return flat


def resolve(args: argparse.Namespace) -> tuple:
    """Merge defaults, file and flags; returns ``(values, explicitly_set_paths)``."""
    values = {k.path: k.default for k in KEYS}
    explicit = set()
    if args.config is not None:
        from_file = load_config_file(args.config)
        values.update(from_file)
        explicit |= set(from_file)
    for k in KEYS:
        flagged = getattr(args, k.path, None)
        if flagged is not None:
            values[k.path] = flagged
            explicit.add(k.path)
    env_seed = os.environ.get("CLIPLAB_SEED")
    for path in ("train.seed", "analyze.seed", "zones.seed"):
        if path not in explicit and env_seed is not None:
            try:
                values[path] = int(env_seed)
            except ValueError:
                raise ConfigError([f"CLIPLAB_SEED must be an integer, got {env_seed!r}"]) from None
    return values, explicit


def make_operator(kind: str, values: dict, explicit: set) -> ClipOperator:
    delta = values["operator.delta"]
    if values["train.granularity"] == Granularity.SEQUENCE.value and "operator.delta" not in explicit:
        delta = SEQUENCE_DELTA
    kind = OperatorKind(kind)
    if kind is OperatorKind.HARD:
        return ClipOperator.hard()
    if kind is OperatorKind.NSR:
        return ClipOperator.nsr(delta)
    if kind is OperatorKind.BINARY_ADMISSION:
        return ClipOperator.binary(delta)
    if kind is OperatorKind.SOFT_DECAY:
        return ClipOperator.soft_decay(values["operator.k"])
    return ClipOperator.probe(values["operator.probe_mode"], values["operator.probe_range"])


def operator_from_label(label: str, values: dict, explicit: set) -> ClipOperator:
    """Parse ablation labels such as ``nsr``, ``soft_decay_k3`` or ``probe_decoupled``."""
    if label.startswith("soft_decay_k"):
        return ClipOperator.soft_decay(int(label[len("soft_decay_k"):]))
    if label.startswith("probe_"):
        return ClipOperator.probe(label[len("probe_"):], values["operator.probe_range"])
    return make_operator(label, values, explicit)


def make_region(values: dict, explicit: set, granularity: str = "token") -> TrustRegion:
    eps_low, eps_high = values["region.eps_low"], values["region.eps_high"]
    if granularity == Granularity.SEQUENCE.value:
        if "region.eps_low" not in explicit:
            eps_low = SEQUENCE_EPS[0]
        if "region.eps_high" not in explicit:
            eps_high = SEQUENCE_EPS[1]
    return TrustRegion(eps_low, eps_high)


def make_train_config(values: dict, explicit: set, operator: Optional[ClipOperator] = None) -> TrainConfig:
    """Build and validate a :class:`TrainConfig`, reporting every invalid part at once."""
    problems = []
    try:
        operator = operator or make_operator(values["operator.kind"], values, explicit)
    except ValueError as exc:
        problems.append(f"operator: {exc}")
    try:
        region = make_region(values, explicit, values["train.granularity"])
    except ValueError as exc:
        problems.append(f"region: {exc}")
    if problems:
        raise ConfigError(problems)
    noise = values["train.advantage_noise"]
    try:
        return _train_config(values, operator, region, noise)
    except ValueError as exc:
        raise ConfigError([f"train: {exc}"]) from None


def _train_config(values, operator, region, noise) -> TrainConfig:
    return TrainConfig(
        operator=operator,
        region=region,
        group_size=values["train.group_size"],
        tasks_per_step=values["train.tasks_per_step"],
        inner_epochs=values["train.inner_epochs"],
        learning_rate=values["train.learning_rate"],
        steps=values["train.steps"],
        seed=values["train.seed"],
        advantage_mode=values["train.advantage_mode"],
        advantage_noise=noise if noise else None,
        granularity=values["train.granularity"],
        dynamic_sampling=values["train.dynamic_sampling"],
        max_resample=values["train.max_resample"],
        difficulty=values["train.difficulty"],
        vocab_size=values["train.vocab_size"],
        max_len=values["train.max_len"],
        context_order=values["train.context_order"],
        eos=values["train.eos"],
    )


def settings_hash(values: dict, sections) -> str:
    chosen = {p: v for p, v in sorted(values.items()) if p.split(".")[0] in sections and p != "output.out_dir"}
    return hashlib.sha256(json.dumps(chosen, sort_keys=True).encode()).hexdigest()[:12]


def _out_dir(values: dict) -> Path:
    out = Path(values["output.out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    return out


def _write_settings(path: Path, values: dict, sections) -> None:
    # out_dir is left out so that a run's files do not depend on where they were written
    chosen = {p: v for p, v in sorted(values.items()) if p.split(".")[0] in sections and p != "output.out_dir"}
    path.write_text(json.dumps(chosen, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# commands


def _window(values: dict, explicit: set, steps: int) -> int:
    """Trailing window for final pass rates; the default shrinks to fit short runs."""
    window = values["output.window"]
    if "output.window" not in explicit:
        return min(window, steps)
    if not 1 <= window <= steps:
        raise ConfigError([f"output.window must lie in [1, {steps}], got {window}"])
    return window


def check_analyze(values: dict) -> list:
    problems = []
    if values["analyze.grid"] < 2:
        problems.append(f"analyze.grid must be at least 2, got {values['analyze.grid']}")
    if not 0 < values["analyze.r_min"] < values["analyze.r_max"]:
        problems.append("analyze grid needs 0 < r_min < r_max")
    if not 0 < values["analyze.delta"] < 1:
        problems.append(f"analyze.delta must lie in (0, 1), got {values['analyze.delta']}")
    if values["analyze.u"] <= 0 or values["analyze.l"] <= 0:
        problems.append("analyze bounds u and l must be positive")
    n = values["analyze.mc_samples"]
    if n != 0 and n < 1000:
        problems.append(f"analyze.mc_samples must be 0 or at least 1000, got {n}")
    return problems


def cmd_analyze(values: dict, explicit: set, threads: int) -> int:
    problems = check_analyze(values)
    if problems:
        raise ConfigError(problems)
    out = _out_dir(values)
    tag = settings_hash(values, ("analyze",))
    grid = np.linspace(values["analyze.r_min"], values["analyze.r_max"], values["analyze.grid"])
    profiles = {"upper": RescueProfile.upper(values["analyze.u"], values["analyze.delta"]),
                "lower": RescueProfile.lower(values["analyze.l"], values["analyze.delta"])}
    for side, profile in profiles.items():
        rows = curve_rows(profile, grid, values["analyze.mc_samples"], values["analyze.seed"], workers=threads)
        path = out / f"analyze_{side}_{tag}.csv"
        write_curve_csv(path, rows)
        print(f"wrote {path} ({len(rows)} rows)")
    _write_settings(out / f"analyze_{tag}.json", values, ("analyze",))
    return EXIT_OK


def cmd_train(values: dict, explicit: set, threads: int) -> int:
    config = make_train_config(values, explicit)
    window = _window(values, explicit, config.steps)
    out = _out_dir(values)
    tag = config.config_hash()
    path = out / f"train_{tag}.jsonl"
    path.unlink(missing_ok=True)  # a rerun replaces the old file instead of appending to it
    with MetricsSink(path) as sink:
        record = train(config, sink=sink, threads=threads)
    summary = summarize([record], window)
    final, peak = summary.per_run_final[0], summary.per_run_peak[0]
    write_summary_csv(out / f"train_{tag}_summary.csv", [(record.label, config.seed, final, peak)])
    (out / f"train_{tag}_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                                  encoding="utf-8")
    print(f"wrote {path}")
    print(f"final={final:.6f} peak={peak:.6f} initial={record.initial_pass_rate:.6f} "
          f"decision_flip_rate={record.decision_flip_rate:.6f}")
    return EXIT_OK


def cmd_ablate(values: dict, explicit: set, threads: int) -> int:
    values = dict(values, **{"train.steps": values["ablate.steps"]})
    problems, operators = [], []
    for label in values["ablate.operators"]:
        try:
            operators.append(operator_from_label(label, values, explicit))
        except (ValueError, TypeError) as exc:
            problems.append(f"ablate.operators: cannot parse {label!r}: {exc}")
    if not values["ablate.seeds"]:
        problems.append("ablate.seeds must not be empty")
    if not operators and not problems:
        problems.append("ablate.operators must not be empty")
    if values["ablate.steps"] < 1:
        problems.append(f"ablate.steps must be positive, got {values['ablate.steps']}")
    if problems:
        raise ConfigError(problems)
    window = _window(values, explicit, values["ablate.steps"])
    configs = [make_train_config(values, explicit, op) for op in operators]
    out = _out_dir(values)
    tag = settings_hash(values, ("operator", "region", "train", "ablate", "output"))
    rows = run_matrix(configs, values["ablate.seeds"], labels=list(values["ablate.operators"]),
                      window=window, workers=threads)
    write_summary_csv(out / f"ablate_{tag}.csv",
                      [(r.label, s, f, p) for r in rows for s, f, p in zip(r.seeds, r.finals, r.peaks)])
    table = format_table(rows)
    (out / f"ablate_{tag}.txt").write_text(table, encoding="utf-8")
    _write_settings(out / f"ablate_{tag}.json", values, ("operator", "region", "train", "ablate", "output"))
    print(table, end="")
    failed = {r.label: r.errors for r in rows if r.errors}
    for label, errors in failed.items():
        for seed, err in errors.items():
            print(f"cell {label} seed {seed} failed: {err}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def check_zones(values: dict) -> list:
    problems = []
    if values["zones.samples"] < 1:
        problems.append(f"zones.samples must be positive, got {values['zones.samples']}")
    if not 0 <= values["zones.half_width"] < 1:
        problems.append(f"zones.half_width must lie in [0, 1), got {values['zones.half_width']}")
    if values["zones.r_dist"] == "lognormal" and not values["zones.r_sigma"] > 0:
        problems.append(f"zones.r_sigma must be positive, got {values['zones.r_sigma']}")
    if values["zones.r_dist"] == "uniform" and not 0 < values["zones.r_low"] < values["zones.r_high"]:
        problems.append("zones uniform range needs 0 < r_low < r_high")
    return problems


def sample_zone_pairs(values: dict, region: TrustRegion, side: str):
    """``(r_dec, r_exec, zone_codes)`` for one bound side."""
    n, hw = values["zones.samples"], values["zones.half_width"]
    rng = np.random.default_rng([values["zones.seed"], 0 if side == "upper" else 1])
    if values["zones.r_dist"] == "lognormal":
        r_dec = np.exp(rng.normal(0.0, values["zones.r_sigma"], n))
    else:
        r_dec = rng.uniform(values["zones.r_low"], values["zones.r_high"], n)
    r_exec = r_dec * rng.uniform(1.0 - hw, 1.0 + hw, n)
    sign = np.full(n, 1 if side == "upper" else -1)
    return r_dec, r_exec, classify_zones(r_dec, r_exec, sign, region)


def cmd_zones(values: dict, explicit: set, threads: int) -> int:
    problems = check_zones(values)
    try:
        region = make_region(values, explicit)
    except ValueError as exc:
        problems.append(f"region: {exc}")
    if problems:
        raise ConfigError(problems)
    out = _out_dir(values)
    tag = settings_hash(values, ("region", "zones"))
    for side in ("upper", "lower"):
        r_dec, r_exec, codes = sample_zone_pairs(values, region, side)
        path = out / f"zones_{side}_{tag}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("r_dec,r_exec,zone\n")
            names = [z.value for z in ZONES]
            fh.writelines(f"{a:.12g},{b:.12g},{names[c]}\n" for a, b, c in zip(r_dec, r_exec, codes))
        counts = np.bincount(codes, minlength=len(ZONES))
        print(f"wrote {path}: " + ", ".join(f"{z.value}={c}" for z, c in zip(ZONES, counts)))
    _write_settings(out / f"zones_{tag}.json", values, ("region", "zones"))
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "train": cmd_train, "ablate": cmd_ablate, "zones": cmd_zones}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        values, explicit = resolve(args)
        if args.command == "train" and values["train.steps"] is None:
            args.subparser.error("--steps is required (flag or train.steps in the config)")
        return COMMANDS[args.command](values, explicit, args.threads)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
