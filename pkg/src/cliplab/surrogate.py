"""Clipped surrogate objective with a pluggable boundary operator.

The objective is the token-level mean ``J = (1/N) sum_t A_t * rtilde_t`` over
all ``N`` tokens of the batch, and the exposed ``loss`` is ``-J``. The gated
form ``mask * grad(r_exec * A)`` is used for every operator; for hard
clipping it coincides with PPO's ``min(r A, clip(r) A)`` (see
:func:`ppo_clip_objective`).

Gradients are reported with respect to each token's new log-probability:
``dJ/dlogprob_t = A_t * weight_t * rtilde_t / N``. For soft decay the
objective value uses the antiderivative of the decay weight so that value and
gradient agree.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .ratio_ops import (
    ZONES,
    ClipOperator,
    OperatorKind,
    TrustRegion,
    apply_operator,
    soft_decay_potential,
)
from .rng import keyed_uniforms

SEQUENCE_POSITION = -1  # RNG key position used for the single draw of a sequence


class Granularity(str, enum.Enum):
    TOKEN = "token"
    SEQUENCE = "sequence"


@dataclass(frozen=True)
class TokenStep:
    logprob_new: float
    logprob_old: float
    advantage: float
    response_id: int
    position: int


@dataclass
class TokenBatch:
    """Column-oriented batch of :class:`TokenStep`."""

    logprob_new: np.ndarray
    logprob_old: np.ndarray
    advantage: np.ndarray
    response_id: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.logprob_new = np.asarray(self.logprob_new, dtype=np.float64)
        self.logprob_old = np.asarray(self.logprob_old, dtype=np.float64)
        self.advantage = np.asarray(self.advantage, dtype=np.float64)
        self.response_id = np.asarray(self.response_id, dtype=np.int64)
        self.position = np.asarray(self.position, dtype=np.int64)
        n = len(self.logprob_new)
        for name in ("logprob_old", "advantage", "response_id", "position"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has the wrong length")

    @classmethod
    def from_steps(cls, steps) -> "TokenBatch":
        steps = list(steps)
        return cls(
            [s.logprob_new for s in steps],
            [s.logprob_old for s in steps],
            [s.advantage for s in steps],
            [s.response_id for s in steps],
            [s.position for s in steps],
        )

    def __len__(self) -> int:
        return len(self.logprob_new)

    def with_logprob_new(self, logprob_new) -> "TokenBatch":
        return TokenBatch(logprob_new, self.logprob_old, self.advantage, self.response_id, self.position)

    @property
    def ratio(self) -> np.ndarray:
        return np.exp(self.logprob_new - self.logprob_old)


@dataclass
class SurrogateResult:
    loss: float
    per_token_weight: np.ndarray
    clip_fraction: float
    zone_counts: dict
    grad_logprob: np.ndarray  # d loss / d logprob_new, per token
    effective_ratio: np.ndarray
    gradient_weight: np.ndarray
    decision_mask: np.ndarray
    hard_mask: np.ndarray
    n_active: int = 0
    n_clipped: int = 0
    decision_flips: int = 0
    zone: np.ndarray = field(default=None, repr=False)


def sequence_ratio(token_steps) -> float:
    """Length-normalised sequence ratio ``exp(mean(logprob_new - logprob_old))``."""
    steps = list(token_steps)
    if not steps:
        raise ValueError("empty response")
    return math.exp(math.fsum(s.logprob_new - s.logprob_old for s in steps) / len(steps))


def ppo_clip_objective(r, adv, region: TrustRegion):
    """PPO's ``min(r A, clip(r, l, u) A)`` and its derivative in ``r``."""
    r = np.asarray(r, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = r * adv
    clipped = np.clip(r, region.lower, region.upper) * adv
    value = np.minimum(unclipped, clipped)
    # ties (r inside [l, u]) take the unclipped branch; the clipped branch is flat
    grad = np.where(unclipped <= clipped, adv, 0.0)
    return value, grad


def _validate(batch: TokenBatch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    for name in ("logprob_new", "logprob_old", "advantage"):
        if np.any(np.isnan(getattr(batch, name))):
            raise ValueError(f"NaN in {name}")
    with np.errstate(over="ignore"):
        ratio = batch.ratio
    if not np.all(np.isfinite(ratio)):
        raise ValueError("non-finite importance ratio")


def token_surrogate(batch, operator: ClipOperator, region: TrustRegion, seed: int = 0, uniforms=None,
                    granularity=Granularity.TOKEN) -> SurrogateResult:
    """Evaluate the surrogate loss and its per-token gradient.

    ``seed`` keys the draws behind stochastic operators: the token at
    ``(response_id, position)`` always sees ``keyed_uniforms(seed,
    response_id, position)``, so results do not depend on batch order.
    Explicit ``uniforms`` (one per token, or one per response at sequence
    granularity in order of first appearance) override the keyed draws.
    """
    if not isinstance(batch, TokenBatch):
        batch = TokenBatch.from_steps(batch)
    _validate(batch)
    granularity = Granularity(granularity)
    if granularity is Granularity.SEQUENCE:
        return _sequence_surrogate(batch, operator, region, seed, uniforms)

    n = len(batch)
    r = batch.ratio
    adv = batch.advantage
    active = adv != 0
    if operator.stochastic and uniforms is None:
        uniforms = keyed_uniforms(seed, batch.response_id, batch.position)
    u = None if uniforms is None else np.asarray(uniforms, dtype=np.float64)[active]
    out = apply_operator(operator, r[active], np.sign(adv[active]), region, u)
    return _assemble(n, active, adv, out, operator, region, r[active], counts=np.ones(active.sum()))


def _sequence_surrogate(batch: TokenBatch, operator, region, seed, uniforms) -> SurrogateResult:
    ids, first, inverse, lengths = np.unique(batch.response_id, return_index=True, return_inverse=True,
                                            return_counts=True)
    order = np.argsort(first)  # responses in order of first appearance
    log_ratio = batch.logprob_new - batch.logprob_old
    mean_log = np.bincount(inverse, weights=log_ratio) / lengths
    seq_ratio = np.exp(mean_log)
    seq_adv = np.zeros(len(ids))
    seq_adv[inverse] = batch.advantage
    if np.any(np.abs(seq_adv[inverse] - batch.advantage) > 0):
        raise ValueError("sequence granularity needs a constant advantage within each response")
    active = seq_adv != 0
    if operator.stochastic:
        if uniforms is None:
            u_all = keyed_uniforms(seed, ids, SEQUENCE_POSITION)
        else:
            u_all = np.empty(len(ids))
            u_all[order] = np.asarray(uniforms, dtype=np.float64)
        u = u_all[active]
    else:
        u = None
    out = apply_operator(operator, seq_ratio[active], np.sign(seq_adv[active]), region, u)
    res = _assemble(len(ids), active, seq_adv, out, operator, region, seq_ratio[active],
                    counts=lengths[active].astype(np.float64), total=len(batch))
    # broadcast per-response quantities back onto tokens
    res.grad_logprob = res.grad_logprob[inverse]
    res.per_token_weight = res.per_token_weight[inverse]
    res.effective_ratio = res.effective_ratio[inverse]
    res.gradient_weight = res.gradient_weight[inverse]
    res.decision_mask = res.decision_mask[inverse]
    res.hard_mask = res.hard_mask[inverse]
    res.zone = res.zone[inverse]
    return res


def _assemble(n_units, active, adv, out, operator, region, r_active, counts, total=None) -> SurrogateResult:
    """Combine operator outcomes on ``n_units`` units (tokens or responses).

    ``counts`` is the number of tokens each active unit stands for and
    ``total`` the token count of the batch.
    """
    total = n_units if total is None else total
    a = adv[active]
    if operator.kind is OperatorKind.SOFT_DECAY:
        value_ratio = soft_decay_potential(r_active, np.sign(a), region, operator.k)
    else:
        value_ratio = out.effective_ratio
    objective = float(np.sum(counts * a * value_ratio)) / total

    grad = np.zeros(n_units)
    grad[active] = -a * out.gradient_weight * out.effective_ratio / total
    weight = np.zeros(n_units)
    weight[active] = np.abs(a) * out.gradient_weight
    eff = np.ones(n_units)
    eff[active] = out.effective_ratio
    gw = np.zeros(n_units)
    gw[active] = out.gradient_weight
    mask = np.zeros(n_units, dtype=bool)
    mask[active] = out.decision_mask
    hard = np.zeros(n_units, dtype=bool)
    hard[active] = out.in_interval
    zone = np.full(n_units, -1, dtype=np.int8)
    zone[active] = out.zone

    n_active = int(counts.sum())
    clipped = int(counts[out.gradient_weight == 0].sum())
    flips = int(counts[out.decision_mask != out.in_interval].sum())
    tally = np.bincount(out.zone, weights=counts, minlength=len(ZONES))
    zone_counts = {z.value: int(c) for z, c in zip(ZONES, tally)}
    return SurrogateResult(
        loss=-objective,
        per_token_weight=weight,
        clip_fraction=clipped / n_active if n_active else 0.0,
        zone_counts=zone_counts,
        grad_logprob=grad,
        effective_ratio=eff,
        gradient_weight=gw,
        decision_mask=mask,
        hard_mask=hard,
        n_active=n_active,
        n_clipped=clipped,
        decision_flips=flips,
        zone=zone,
    )
