"""Group-relative advantages and the magnitude interventions on them."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class AdvantageMode(str, enum.Enum):
    NORMALIZED = "normalized"
    RAW_BINARY = "raw_binary"
    NOISE_SCALED = "noise_scaled"


class DegenerateGroup(ValueError):
    """All rewards in a group are equal, so the normalized advantage is undefined."""


@dataclass
class RolloutGroup:
    task_id: int
    responses: list
    rewards: list
    logprobs: list = field(default_factory=list)
    degenerate: bool = False

    def __post_init__(self):
        if len(self.rewards) != len(self.responses):
            raise ValueError("rewards and responses differ in length")
        if len(self.rewards) < 2:
            raise ValueError("a group needs at least two responses")

    @property
    def group_size(self) -> int:
        return len(self.responses)

    @property
    def mixed(self) -> bool:
        return len(set(self.rewards)) > 1


@dataclass(frozen=True)
class AdvantageVector:
    values: np.ndarray
    mode: AdvantageMode


def group_advantage(group: RolloutGroup, mode=AdvantageMode.NORMALIZED) -> AdvantageVector:
    """Per-response advantage.

    ``NORMALIZED`` standardises rewards with the population standard
    deviation and raises :class:`DegenerateGroup` when it is zero.
    ``RAW_BINARY`` maps a passing reward to +1 and anything else to -1.
    """
    mode = AdvantageMode(mode)
    rewards = np.asarray(group.rewards, dtype=np.float64)
    if mode is AdvantageMode.RAW_BINARY:
        return AdvantageVector(np.where(rewards > 0, 1.0, -1.0), mode)
    if mode is not AdvantageMode.NORMALIZED:
        raise ValueError(f"{mode.value} advantages come from perturb_advantage")
    sigma = rewards.std()
    if sigma == 0.0:
        raise DegenerateGroup(f"task {group.task_id}: all {len(rewards)} rewards equal {rewards[0]:g}")
    return AdvantageVector((rewards - rewards.mean()) / sigma, mode)


def perturb_advantage(adv: AdvantageVector, half_width: float, rng: np.random.Generator) -> AdvantageVector:
    """Multiply each advantage by an independent ``z ~ U(1 - hw, 1 + hw)``.

    Signs are preserved, so admissible intervals never change.
    """
    if not (0.0 <= half_width < 1.0):
        raise ValueError(f"half_width must lie in [0, 1), got {half_width}")
    values = np.asarray(adv.values, dtype=np.float64)
    if half_width == 0.0:
        return AdvantageVector(values.copy(), AdvantageMode.NOISE_SCALED)
    z = rng.uniform(1.0 - half_width, 1.0 + half_width, size=values.shape)
    return AdvantageVector(values * z, AdvantageMode.NOISE_SCALED)
