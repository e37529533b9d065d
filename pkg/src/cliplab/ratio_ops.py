"""Boundary operators acting on importance ratios.

Each operator maps a ratio ``r`` (plus the advantage-dependent admissible
interval and, for the stochastic ones, a uniform draw) to an
:class:`OperatorOutcome`: the effective ratio used by the surrogate, a
non-negative gradient weight, a zone label and the decision mask.

Gradient convention shared by every operator: the per-token objective
gradient is ``advantage * gradient_weight * (effective_ratio / r) * dr``.
For in-bound tokens this is the plain ``advantage * dr``; a rescued NSR token
carries the factor ``z``; a binary-admitted token carries ``u / r``.

The scalar functions are the reference implementation. :func:`apply_operator`
is the vectorised path used by the surrogate; tests hold the two equal.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np


class Bound(str, enum.Enum):
    UPPER = "Upper"
    LOWER = "Lower"


class Zone(str, enum.Enum):
    SAFE = "Safe"
    RESCUED = "Rescued"
    PUSHED_OUT = "PushedOut"
    DEEP_VIOLATION = "DeepViolation"
    CLIPPED_FALLBACK = "ClippedFallback"


# Integer codes for the vectorised path, in Zone declaration order.
ZONES: tuple[Zone, ...] = tuple(Zone)
ZONE_CODE = {z: i for i, z in enumerate(ZONES)}
SAFE, RESCUED, PUSHED_OUT, DEEP_VIOLATION, CLIPPED_FALLBACK = range(5)


class OperatorKind(str, enum.Enum):
    HARD = "hard"
    NSR = "nsr"
    BINARY_ADMISSION = "binary"
    SOFT_DECAY = "soft_decay"
    NOISE_PROBE = "probe"


class ProbeMode(str, enum.Enum):
    COUPLED = "coupled"
    DECOUPLED = "decoupled"
    ONLY_RESCUE = "only_rescue"
    ONLY_PUSH_OUT = "only_push_out"


@dataclass(frozen=True)
class TrustRegion:
    """Asymmetric clip bounds ``(1 - eps_low, 1 + eps_high)``."""

    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        if not (0.0 <= self.eps_low < 1.0):
            raise ValueError(f"eps_low must lie in [0, 1), got {self.eps_low}")
        if not (self.eps_high >= 0.0 and math.isfinite(self.eps_high)):
            raise ValueError(f"eps_high must be finite and >= 0, got {self.eps_high}")

    @property
    def lower(self) -> float:
        return 1.0 - self.eps_low

    @property
    def upper(self) -> float:
        return 1.0 + self.eps_high


@dataclass(frozen=True)
class AdmissibleInterval:
    lower: float
    upper: float
    active_bound: Bound
    bound_value: float

    def contains(self, r: float) -> bool:
        return self.lower <= r <= self.upper


def trust_interval(adv_sign: int, region: TrustRegion) -> AdmissibleInterval:
    """Admissible ratio interval for a token with the given advantage sign.

    Positive advantages are bounded above by ``1 + eps_high``; negative ones
    below by ``1 - eps_low``. Zero-advantage tokens never reach this function.
    """
    if adv_sign > 0:
        return AdmissibleInterval(-math.inf, region.upper, Bound.UPPER, region.upper)
    if adv_sign < 0:
        return AdmissibleInterval(region.lower, math.inf, Bound.LOWER, region.lower)
    raise ValueError("advantage sign must be nonzero")


@dataclass(frozen=True)
class ClipOperator:
    """Configuration selecting one boundary behaviour.

    Use the constructors :meth:`hard`, :meth:`nsr`, :meth:`binary`,
    :meth:`soft_decay` and :meth:`probe` rather than filling fields by hand.
    """

    kind: OperatorKind = OperatorKind.HARD
    delta: Optional[float] = None
    k: Optional[int] = None
    probe_mode: Optional[ProbeMode] = None
    probe_range: float = 0.2

    def __post_init__(self):
        kind = OperatorKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in (OperatorKind.NSR, OperatorKind.BINARY_ADMISSION):
            _check_delta(self.delta)
        if kind is OperatorKind.SOFT_DECAY:
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise ValueError(f"soft decay needs a positive integer k, got {self.k}")
            object.__setattr__(self, "k", int(self.k))
            if self.k not in (2, 3, 4):
                warnings.warn(f"soft decay k={self.k} is outside the studied set {{2, 3, 4}}")
        if kind is OperatorKind.NOISE_PROBE:
            if self.probe_mode is None:
                raise ValueError("noise probe needs a probe_mode")
            object.__setattr__(self, "probe_mode", ProbeMode(self.probe_mode))
            _check_half_width(self.probe_range)

    @classmethod
    def hard(cls) -> "ClipOperator":
        return cls(OperatorKind.HARD)

    @classmethod
    def nsr(cls, delta: float = 0.1) -> "ClipOperator":
        return cls(OperatorKind.NSR, delta=delta)

    @classmethod
    def binary(cls, delta: float = 0.1) -> "ClipOperator":
        return cls(OperatorKind.BINARY_ADMISSION, delta=delta)

    @classmethod
    def soft_decay(cls, k: int = 2) -> "ClipOperator":
        return cls(OperatorKind.SOFT_DECAY, k=k)

    @classmethod
    def probe(cls, mode, half_width: float = 0.2) -> "ClipOperator":
        return cls(OperatorKind.NOISE_PROBE, probe_mode=ProbeMode(mode), probe_range=half_width)

    @property
    def stochastic(self) -> bool:
        return self.kind in (OperatorKind.NSR, OperatorKind.BINARY_ADMISSION, OperatorKind.NOISE_PROBE)

    @property
    def half_width(self) -> float:
        """Half-width of the multiplicative noise ``z``; 0 for deterministic operators."""
        if self.kind is OperatorKind.NOISE_PROBE:
            return self.probe_range
        if self.kind in (OperatorKind.NSR, OperatorKind.BINARY_ADMISSION):
            return self.delta
        return 0.0

    @property
    def label(self) -> str:
        if self.kind is OperatorKind.SOFT_DECAY:
            return f"soft_decay_k{self.k}"
        if self.kind is OperatorKind.NOISE_PROBE:
            return f"probe_{self.probe_mode.value}"
        if self.kind in (OperatorKind.NSR, OperatorKind.BINARY_ADMISSION):
            return f"{self.kind.value}_d{self.delta:g}"
        return self.kind.value

    def apply(self, r: float, adv: float, region: TrustRegion, rng=None, z=None) -> "OperatorOutcome":
        """Scalar dispatch; ``adv`` must be nonzero."""
        interval = trust_interval(1 if adv > 0 else -1, region)
        if self.kind is OperatorKind.HARD:
            return hard_clip(r, interval)
        if self.kind is OperatorKind.NSR:
            return nsr_rescue(r, interval, self.delta, rng, z=z)
        if self.kind is OperatorKind.BINARY_ADMISSION:
            return binary_admission(r, interval, self.delta, rng, z=z)
        if self.kind is OperatorKind.SOFT_DECAY:
            return soft_decay(r, interval, self.k)
        return noise_probe(r, adv, interval, self.probe_mode, self.probe_range, rng, z=z)


@dataclass(frozen=True)
class OperatorOutcome:
    effective_ratio: float
    gradient_weight: float
    zone: Zone
    decision_mask: bool


def _check_ratio(r: float) -> None:
    if not (r > 0.0 and math.isfinite(r)):
        raise ValueError(f"ratio must be positive and finite, got {r}")


def _check_delta(delta) -> None:
    if delta is None or not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def _check_half_width(half_width) -> None:
    if half_width is None or not (0.0 < half_width < 1.0):
        raise ValueError(f"half_width must lie in (0, 1), got {half_width}")


def _draw_z(half_width: float, rng, z) -> float:
    if z is not None:
        return float(z)
    if rng is None:
        raise ValueError("a stochastic operator needs an rng or an explicit z")
    return 1.0 - half_width + 2.0 * half_width * float(rng.random())


def classify_zone(r_dec: float, r_exec: float, interval: AdmissibleInterval) -> Zone:
    """Place a (decision, execution) ratio pair in the Safe/Rescued/PushedOut/Deep map."""
    dec_in = interval.contains(r_dec)
    exec_in = interval.contains(r_exec)
    if dec_in and exec_in:
        return Zone.SAFE
    if exec_in:
        return Zone.RESCUED
    if dec_in:
        return Zone.PUSHED_OUT
    return Zone.DEEP_VIOLATION


def hard_clip(r: float, interval: AdmissibleInterval) -> OperatorOutcome:
    _check_ratio(r)
    if interval.contains(r):
        return OperatorOutcome(r, 1.0, Zone.SAFE, True)
    return OperatorOutcome(interval.bound_value, 0.0, Zone.DEEP_VIOLATION, False)


def nsr_rescue(r: float, interval: AdmissibleInterval, delta: float, rng=None, *, z=None) -> OperatorOutcome:
    """Near-boundary stochastic rescue.

    In-bound ratios pass through. An out-of-bound ratio is kept with
    effective ratio ``r * z`` when that product lands back inside the
    interval, ``z ~ U(1 - delta, 1 + delta)``; otherwise it falls back to the
    clamped, detached bound. One uniform is consumed on every call.
    """
    _check_ratio(r)
    _check_delta(delta)
    z = _draw_z(delta, rng, z)
    if interval.contains(r):
        return OperatorOutcome(r, 1.0, Zone.SAFE, True)
    if interval.contains(r * z):
        return OperatorOutcome(r * z, 1.0, Zone.RESCUED, False)
    return OperatorOutcome(interval.bound_value, 0.0, Zone.CLIPPED_FALLBACK, False)


def binary_admission(r: float, interval: AdmissibleInterval, delta: float, rng=None, *, z=None) -> OperatorOutcome:
    """Same admission test as :func:`nsr_rescue`, but admitted tokens execute at the bound."""
    _check_ratio(r)
    _check_delta(delta)
    z = _draw_z(delta, rng, z)
    if interval.contains(r):
        return OperatorOutcome(r, 1.0, Zone.SAFE, True)
    if interval.contains(r * z):
        return OperatorOutcome(interval.bound_value, 1.0, Zone.RESCUED, False)
    return OperatorOutcome(interval.bound_value, 0.0, Zone.CLIPPED_FALLBACK, False)


def soft_decay_weight(r: float, interval: AdmissibleInterval, k: int) -> float:
    if interval.contains(r):
        return 1.0
    b = interval.bound_value
    return (b / r) ** k if interval.active_bound is Bound.UPPER else (r / b) ** k


def soft_decay(r: float, interval: AdmissibleInterval, k: int) -> OperatorOutcome:
    """Deterministic out-of-bound weight ``(u/r)**k`` above, ``(r/l)**k`` below."""
    _check_ratio(r)
    if interval.contains(r):
        return OperatorOutcome(r, 1.0, Zone.SAFE, True)
    return OperatorOutcome(r, soft_decay_weight(r, interval, k), Zone.DEEP_VIOLATION, False)


def noise_probe(r: float, adv: float, interval: AdmissibleInterval, mode, half_width: float = 0.2,
                rng=None, *, z=None) -> OperatorOutcome:
    """Diagnostic multiplicative ratio noise, ``z ~ U(1 - half_width, 1 + half_width)``.

    ``Coupled`` perturbs decision and execution together, so the noise can
    flip the mask. ``Decoupled`` keeps the decision on the clean ratio and
    executes on ``r * z``; a clean out-of-bound token survives only if
    ``r * z`` is back inside. ``OnlyRescue`` / ``OnlyPushOut`` apply the
    decoupled rule inside their own zone and hard clipping elsewhere.
    """
    _check_ratio(r)
    _check_half_width(half_width)
    if adv == 0 or (adv > 0) != (interval.active_bound is Bound.UPPER):
        raise ValueError("advantage sign does not match the interval")
    mode = ProbeMode(mode)
    z = _draw_z(half_width, rng, z)
    r_exec = r * z
    if mode is ProbeMode.COUPLED:
        zone = classify_zone(r_exec, r_exec, interval)
        if zone is Zone.SAFE:
            return OperatorOutcome(r_exec, 1.0, zone, True)
        return OperatorOutcome(interval.bound_value, 0.0, zone, False)

    zone = classify_zone(r, r_exec, interval)
    mask = zone in (Zone.SAFE, Zone.PUSHED_OUT)
    if mode is ProbeMode.DECOUPLED:
        active = zone is not Zone.DEEP_VIOLATION
    elif mode is ProbeMode.ONLY_RESCUE:
        active = zone is Zone.RESCUED
    else:
        active = zone is Zone.PUSHED_OUT
    if active:
        return OperatorOutcome(r_exec, 1.0, zone, mask)
    base = hard_clip(r, interval)
    return OperatorOutcome(base.effective_ratio, base.gradient_weight, zone, mask)


# --------------------------------------------------------------------------
# vectorised path


@dataclass
class BatchOutcome:
    effective_ratio: np.ndarray
    gradient_weight: np.ndarray
    zone: np.ndarray  # int codes into ZONES
    decision_mask: np.ndarray
    in_interval: np.ndarray  # clean membership of r, i.e. the hard-clip mask


def _bounds(adv_sign: np.ndarray, region: TrustRegion):
    upper_side = adv_sign > 0
    lo = np.where(upper_side, -np.inf, region.lower)
    hi = np.where(upper_side, region.upper, np.inf)
    bound = np.where(upper_side, region.upper, region.lower)
    return upper_side, lo, hi, bound


def _zone_codes(dec_in: np.ndarray, exec_in: np.ndarray) -> np.ndarray:
    return np.select(
        [dec_in & exec_in, exec_in, dec_in],
        [SAFE, RESCUED, PUSHED_OUT],
        default=DEEP_VIOLATION,
    ).astype(np.int8)


def classify_zones(r_dec, r_exec, adv_sign, region: TrustRegion) -> np.ndarray:
    """Vectorised :func:`classify_zone`; returns int codes into ``ZONES``."""
    _, lo, hi, _ = _bounds(np.asarray(adv_sign), region)
    r_dec = np.asarray(r_dec, dtype=np.float64)
    r_exec = np.asarray(r_exec, dtype=np.float64)
    return _zone_codes((r_dec >= lo) & (r_dec <= hi), (r_exec >= lo) & (r_exec <= hi))


def apply_operator(operator: ClipOperator, ratios, adv_sign, region: TrustRegion, uniforms=None) -> BatchOutcome:
    """Vectorised operator application.

    ``adv_sign`` entries must be +1 or -1. ``uniforms`` (same shape as
    ``ratios``) supplies the draw behind ``z`` for stochastic operators.
    """
    r = np.asarray(ratios, dtype=np.float64)
    sign = np.asarray(adv_sign)
    if np.any(~(r > 0)) or not np.all(np.isfinite(r)):
        raise ValueError("ratios must be positive and finite")
    if np.any(sign == 0):
        raise ValueError("zero-advantage tokens must be filtered before applying an operator")
    upper_side, lo, hi, bound = _bounds(sign, region)
    dec_in = (r >= lo) & (r <= hi)
    kind = operator.kind

    if kind in (OperatorKind.HARD, OperatorKind.SOFT_DECAY):
        if kind is OperatorKind.HARD:
            eff = np.where(dec_in, r, bound)
            weight = dec_in.astype(np.float64)
        else:
            eff = r.copy()
            decay = np.where(upper_side, bound / r, r / bound) ** operator.k
            weight = np.where(dec_in, 1.0, decay)
        zone = np.where(dec_in, SAFE, DEEP_VIOLATION).astype(np.int8)
        return BatchOutcome(eff, weight, zone, dec_in.copy(), dec_in)

    if uniforms is None:
        raise ValueError("stochastic operator needs uniforms")
    hw = operator.half_width
    z = 1.0 - hw + 2.0 * hw * np.asarray(uniforms, dtype=np.float64)
    r_exec = r * z
    exec_in = (r_exec >= lo) & (r_exec <= hi)

    if kind in (OperatorKind.NSR, OperatorKind.BINARY_ADMISSION):
        rescued = ~dec_in & exec_in
        executed = r_exec if kind is OperatorKind.NSR else bound
        eff = np.where(dec_in, r, np.where(rescued, executed, bound))
        weight = (dec_in | rescued).astype(np.float64)
        zone = np.where(dec_in, SAFE, np.where(rescued, RESCUED, CLIPPED_FALLBACK)).astype(np.int8)
        return BatchOutcome(eff, weight, zone, dec_in.copy(), dec_in)

    mode = operator.probe_mode
    if mode is ProbeMode.COUPLED:
        eff = np.where(exec_in, r_exec, bound)
        zone = np.where(exec_in, SAFE, DEEP_VIOLATION).astype(np.int8)
        return BatchOutcome(eff, exec_in.astype(np.float64), zone, exec_in.copy(), dec_in)

    zone = _zone_codes(dec_in, exec_in)
    if mode is ProbeMode.DECOUPLED:
        active = zone != DEEP_VIOLATION
    elif mode is ProbeMode.ONLY_RESCUE:
        active = zone == RESCUED
    else:
        active = zone == PUSHED_OUT
    eff = np.where(active, r_exec, np.where(dec_in, r, bound))
    weight = (active | dec_in).astype(np.float64)
    return BatchOutcome(eff, weight, zone, dec_in.copy(), dec_in)


def soft_decay_potential(ratios, adv_sign, region: TrustRegion, k: int) -> np.ndarray:
    """Antiderivative of the soft-decay weight, anchored so it equals ``r`` in-bound.

    Its derivative in ``r`` is exactly the soft-decay gradient weight, which
    makes it the objective value whose gradient the soft-decay operator
    produces.
    """
    r = np.asarray(ratios, dtype=np.float64)
    upper_side, lo, hi, bound = _bounds(np.asarray(adv_sign), region)
    inside = (r >= lo) & (r <= hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        if k == 1:
            up = bound + bound * np.log(r / bound)
        else:
            up = bound + bound * (1.0 - (bound / r) ** (k - 1)) / (k - 1)
        low = bound - bound * (1.0 - (r / bound) ** (k + 1)) / (k + 1)
    return np.where(inside, r, np.where(upper_side, up, low))
