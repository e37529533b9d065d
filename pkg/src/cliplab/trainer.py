"""RLVR training loop on the tabular environment, and the experiment matrix."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .advantage import AdvantageMode, RolloutGroup, group_advantage, perturb_advantage
from .metrics import MetricsSink, RunRecord, StepMetrics, ZONE_KEYS, mean_sd, summarize
from .ratio_ops import ClipOperator, TrustRegion
from .rng import derive_seed
from .simenv import SoftmaxPolicy, Task, _log_softmax, eval_tasks, sample_task, verify
from .surrogate import Granularity, TokenBatch, token_surrogate

log = logging.getLogger(__name__)

# stream tags for np.random.default_rng([seed, step, tag, ...])
_TASKS, _ROLLOUT, _ADV_NOISE = 0, 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    operator: ClipOperator = field(default_factory=ClipOperator.hard)
    region: TrustRegion = field(default_factory=TrustRegion)
    group_size: int = 8
    tasks_per_step: int = 32
    inner_epochs: int = 4
    learning_rate: float = 10.0
    steps: int = 300
    seed: int = 0
    advantage_mode: AdvantageMode = AdvantageMode.NORMALIZED
    advantage_noise: Optional[float] = None
    granularity: Granularity = Granularity.TOKEN
    dynamic_sampling: bool = True
    max_resample: int = 20
    difficulty: int = 1
    vocab_size: int = 16
    max_len: int = 12
    context_order: int = 1
    eos: bool = True

    def __post_init__(self):
        object.__setattr__(self, "advantage_mode", AdvantageMode(self.advantage_mode))
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        for name in ("tasks_per_step", "inner_epochs", "steps", "max_resample"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.advantage_noise is not None and not (0.0 <= self.advantage_noise < 1.0):
            raise ValueError("advantage_noise must lie in [0, 1)")

    def to_dict(self) -> dict:
        op = self.operator
        return {
            "operator": {"kind": op.kind.value, "delta": op.delta, "k": op.k,
                         "probe_mode": op.probe_mode.value if op.probe_mode else None,
                         "probe_range": op.probe_range},
            "region": {"eps_low": self.region.eps_low, "eps_high": self.region.eps_high},
            "train": {
                "group_size": self.group_size, "tasks_per_step": self.tasks_per_step,
                "inner_epochs": self.inner_epochs, "learning_rate": self.learning_rate,
                "steps": self.steps, "seed": self.seed, "advantage_mode": self.advantage_mode.value,
                "advantage_noise": self.advantage_noise, "granularity": self.granularity.value,
                "dynamic_sampling": self.dynamic_sampling, "max_resample": self.max_resample,
                "difficulty": self.difficulty, "vocab_size": self.vocab_size, "max_len": self.max_len,
                "context_order": self.context_order, "eos": self.eos,
            },
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def dynamic_sample(policy: SoftmaxPolicy, task: Task, G: int, rng: np.random.Generator,
                   max_resample: int = 20) -> RolloutGroup:
    """Sample whole groups until one mixes passing and failing responses.

    After ``max_resample`` attempts the last group is returned with
    ``degenerate=True``.
    """
    if G < 2:
        raise ValueError("group size must be at least 2")
    for _ in range(max(1, max_resample)):
        rolls = policy.rollout_batch(task, rng.random((G, policy.max_len)))
        rewards = [verify(task, r.tokens) for r in rolls]
        group = RolloutGroup(task.prompt_id, [r.tokens for r in rolls], rewards, [r.logprobs for r in rolls])
        if group.mixed:
            return group
    group.degenerate = True
    return group


def _sample_groups(policy, config: TrainConfig, step: int, threads: int):
    task_rng = np.random.default_rng([config.seed, step, _TASKS])
    tasks = [sample_task(task_rng, config.difficulty, config.vocab_size, config.max_len, config.eos)
             for _ in range(config.tasks_per_step)]
    attempts = config.max_resample if config.dynamic_sampling else 1

    def one(i):
        rng = np.random.default_rng([config.seed, step, _ROLLOUT, i])
        return dynamic_sample(policy, tasks[i], config.group_size, rng, attempts)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            groups = list(pool.map(one, range(len(tasks))))
    else:
        groups = [one(i) for i in range(len(tasks))]
    return tasks, groups


def _build_batch(policy, config: TrainConfig, step, tasks, groups):
    cols = {k: [] for k in ("bucket", "state", "token", "lp_old", "adv", "rid", "pos")}
    rid = 0
    for i, (task, group) in enumerate(zip(tasks, groups)):
        if group.degenerate:
            continue
        adv = group_advantage(group, config.advantage_mode)
        if config.advantage_noise:
            noise_rng = np.random.default_rng([config.seed, step, _ADV_NOISE, i])
            adv = perturb_advantage(adv, config.advantage_noise, noise_rng)
        for tokens, lps, a in zip(group.responses, group.logprobs, adv.values):
            n = len(tokens)
            cols["bucket"].append(np.full(n, policy.bucket(task)))
            cols["state"].append(policy.states(tokens))
            cols["token"].append(tokens)
            cols["lp_old"].append(lps)
            cols["adv"].append(np.full(n, a))
            cols["rid"].append(np.full(n, rid))
            cols["pos"].append(np.arange(n))
            rid += 1
    if rid == 0:
        return None
    return {k: np.concatenate(v) for k, v in cols.items()}


def _mean_entropy(policy, tasks, groups) -> float:
    buckets, states = [], []
    for task, group in zip(tasks, groups):
        for tokens in group.responses:
            buckets.append(np.full(len(tokens), policy.bucket(task)))
            states.append(policy.states(tokens))
    buckets, states = np.concatenate(buckets), np.concatenate(states)
    if not len(buckets):
        return 0.0
    logp = _log_softmax(policy.params[buckets, states])
    return float(-(np.exp(logp) * logp).sum(axis=-1).mean())


def _eval_pass_rate(policy, tasks) -> float:
    return float(np.mean([policy.pass_probability(t) for t in tasks]))


def train(config: TrainConfig, sink: Optional[MetricsSink] = None, threads: int = 1) -> RunRecord:
    """Run GRPO-style training with the configured boundary operator.

    Each step freezes the old policy, samples groups (with dynamic sampling),
    then makes ``inner_epochs`` full-batch SGD passes on the surrogate. All
    randomness is keyed by ``(seed, step, ...)``, so the record is a pure
    function of the config.
    """
    policy = SoftmaxPolicy.for_tasks(config.vocab_size, config.context_order, config.max_len, config.eos)
    evals = eval_tasks(config.difficulty, config.vocab_size, config.max_len, config.eos)
    initial = _eval_pass_rate(policy, evals)
    per_step = []
    flips = active_total = 0

    for step in range(config.steps):
        tasks, groups = _sample_groups(policy, config, step, threads)
        rewards = [r for g in groups for r in g.rewards]
        lengths = [len(t) for g in groups for t in g.responses]
        degenerate = sum(g.degenerate for g in groups)
        entropy = _mean_entropy(policy, tasks, groups)
        batch = _build_batch(policy, config, step, tasks, groups)

        zone_counts = dict.fromkeys(ZONE_KEYS, 0)
        clipped = processed = 0
        if batch is not None:
            tb = TokenBatch(batch["lp_old"], batch["lp_old"], batch["adv"], batch["rid"], batch["pos"])
            for epoch in range(config.inner_epochs):
                lp_new, logp = policy.log_probs_at(batch["bucket"], batch["state"], batch["token"])
                res = token_surrogate(tb.with_logprob_new(lp_new), config.operator, config.region,
                                      seed=derive_seed(config.seed, step, epoch),
                                      granularity=config.granularity)
                if not math.isfinite(res.loss) or not np.all(np.isfinite(res.grad_logprob)):
                    raise TrainingError(
                        f"non-finite loss at step {step} epoch {epoch}: loss={res.loss}, "
                        f"max|logit|={np.abs(policy.params).max():.3g}, ratio range="
                        f"[{np.exp(lp_new - batch['lp_old']).min():.3g}, {np.exp(lp_new - batch['lp_old']).max():.3g}]")
                grad = policy.scatter_grad(-res.grad_logprob, batch["bucket"], batch["state"], batch["token"], logp)
                policy.params += config.learning_rate * grad
                for k, v in res.zone_counts.items():
                    zone_counts[k] += v
                clipped += res.n_clipped
                processed += res.n_active
                flips += res.decision_flips
                active_total += res.n_active

        m = StepMetrics(
            step=step,
            mean_reward=float(np.mean(rewards)),
            pass_rate=_eval_pass_rate(policy, evals),
            clip_fraction=clipped / processed if processed else 0.0,
            zone_counts=zone_counts,
            entropy=entropy,
            mean_length=float(np.mean(lengths)),
            degenerate_groups=int(degenerate),
        )
        per_step.append(m)
        if sink is not None:
            sink.append(m)
        if step % 50 == 0:
            log.debug("step %d pass=%.4f clip=%.4f", step, m.pass_rate, m.clip_fraction)

    return RunRecord(
        config_hash=config.config_hash(),
        per_step=per_step,
        final_pass_rate=per_step[-1].pass_rate,
        initial_pass_rate=initial,
        label=config.operator.label,
        seed=config.seed,
        decision_flip_rate=flips / active_total if active_total else 0.0,
    )


@dataclass
class MatrixRow:
    label: str
    seeds: list
    finals: list
    peaks: list
    mean: float
    sd: float
    flip_rates: list
    clip_fractions: list
    errors: dict
    records: list = field(default_factory=list, repr=False)


def _run_cell(args):
    config, window = args
    try:
        rec = train(config)
        s = summarize([rec], window)
        clip = float(np.mean([m.clip_fraction for m in rec.per_step]))
        return rec, s.per_run_final[0], s.per_run_peak[0], clip, None
    except Exception as exc:  # a failed cell must not abort the matrix
        return None, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"


def run_matrix(configs, seeds, labels=None, window: int = 10, workers: int = 1) -> list:
    """Train every (config, seed) pair and aggregate finals per config.

    Rows follow ``configs`` order; failures are recorded per cell.
    """
    configs, seeds = list(configs), list(seeds)
    if not configs or not seeds:
        raise ValueError("run_matrix needs at least one config and one seed")
    labels = list(labels) if labels else [c.operator.label for c in configs]
    jobs = [(replace(c, seed=s), window) for c in configs for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]

    rows = []
    for i, label in enumerate(labels):
        chunk = cells[i * len(seeds):(i + 1) * len(seeds)]
        finals = [c[1] for c in chunk]
        ok = [f for f in finals if math.isfinite(f)]
        mean, sd = mean_sd(ok) if ok else (math.nan, math.nan)
        rows.append(MatrixRow(
            label=label, seeds=seeds, finals=finals, peaks=[c[2] for c in chunk], mean=mean, sd=sd,
            flip_rates=[c[0].decision_flip_rate if c[0] else math.nan for c in chunk],
            clip_fractions=[c[3] for c in chunk],
            errors={s: c[4] for s, c in zip(seeds, chunk) if c[4]},
            records=[c[0] for c in chunk],
        ))
    return rows


def format_table(rows, scale: float = 100.0) -> str:
    """Aligned text in the run-by-run plus ``mean +- SD`` layout."""
    n = max(len(r.seeds) for r in rows)
    head = ["Method"] + [f"Run {i + 1}" for i in range(n)] + ["Mean +- SD"]
    body = []
    for r in rows:
        cells = ["error" if not math.isfinite(f) else f"{f * scale:.2f}" for f in r.finals]
        cells += [""] * (n - len(cells))
        agg = "error" if not math.isfinite(r.mean) else f"{r.mean * scale:.2f} +- {r.sd * scale:.2f}"
        body.append([r.label] + cells + [agg])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    lines = [fmt(head), "-" * len(fmt(head))] + [fmt(row) for row in body]
    return "\n".join(lines) + "\n"


def default_ablation(delta: float = 0.1) -> list:
    """Hard, binary admission, soft decay k = 2, 3, 4 and NSR, in table order."""
    return [ClipOperator.hard(), ClipOperator.binary(delta), ClipOperator.soft_decay(2),
            ClipOperator.soft_decay(3), ClipOperator.soft_decay(4), ClipOperator.nsr(delta)]


__all__ = [
    "TrainConfig", "TrainingError", "RunRecord", "dynamic_sample", "train", "run_matrix",
    "format_table", "default_ablation", "MatrixRow",
]
