"""Expectation-level behaviour of stochastic rescue, closed form and Monte Carlo.

With ``z ~ U(a, b)``, ``a = 1 - delta``, ``b = 1 + delta``, an out-of-bound
ratio ``r`` executes at ``min(r z, u)`` (upper bound) or ``max(r z, l)``
(lower bound). Everything here is written in terms of the critical value
``c = bound / r``, the ``z`` at which the rescue test switches.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ratio_ops import Bound

SHARD_SIZE = 1 << 18


@dataclass(frozen=True)
class RescueProfile:
    bound_side: Bound
    bound_value: float
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "bound_side", Bound(self.bound_side))
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not (self.bound_value > 0.0):
            raise ValueError(f"bound must be positive, got {self.bound_value}")

    @classmethod
    def upper(cls, u: float = 1.28, delta: float = 0.1) -> "RescueProfile":
        return cls(Bound.UPPER, u, delta)

    @classmethod
    def lower(cls, l: float = 0.8, delta: float = 0.1) -> "RescueProfile":
        return cls(Bound.LOWER, l, delta)

    @property
    def is_upper(self) -> bool:
        return self.bound_side is Bound.UPPER

    @property
    def rescue_zone(self) -> tuple[float, float]:
        """Open interval of ratios with a nonzero, non-certain rescue chance."""
        if self.is_upper:
            return self.bound_value, self.bound_value / (1.0 - self.delta)
        return self.bound_value / (1.0 + self.delta), self.bound_value

    @property
    def breakpoints(self) -> tuple[float, float]:
        """(inner, outer): the trust-region bound and the deep-violation edge."""
        lo, hi = self.rescue_zone
        return (lo, hi) if self.is_upper else (hi, lo)

    def inside(self, r):
        r = np.asarray(r, dtype=np.float64)
        return r <= self.bound_value if self.is_upper else r >= self.bound_value


def _as_output(x, like):
    return float(x) if np.ndim(like) == 0 else x


def _check_r(r):
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(r > 0)):
        raise ValueError("ratio must be positive")
    return r


def rescue_attempt_mean(r, profile: RescueProfile):
    """``E_z[min(r z, u)]`` or ``E_z[max(r z, l)]`` for any ``r > 0``.

    This ignores the in-bound pass-through; :func:`expected_ratio` adds it.
    """
    r = _check_r(r)
    d, B = profile.delta, profile.bound_value
    a, b = 1.0 - d, 1.0 + d
    c = B / r
    if profile.is_upper:
        mid = (r * (c * c - a * a) / 2.0 + B * (b - c)) / (2.0 * d)
        out = np.where(c <= a, B, np.where(c >= b, r, mid))
    else:
        mid = (B * (c - a) + r * (b * b - c * c) / 2.0) / (2.0 * d)
        out = np.where(c >= b, B, np.where(c <= a, r, mid))
    return _as_output(out, r)


def expected_ratio(r, profile: RescueProfile):
    """Expected effective ratio under NSR.

    Upper side, rescue zone ``u < r < u/(1-delta)``::

        f(r) = (u(1+delta) - u^2/(2r) - (1-delta)^2 r / 2) / (2 delta)

    and ``f = r`` in-bound, ``f = u`` for deep violations. The lower side is
    the mirror image with ``max(r z, l)``::

        f(r) = (l^2/(2r) - l(1-delta) + (1+delta)^2 r / 2) / (2 delta)
    """
    r = _check_r(r)
    out = np.where(profile.inside(r), r, rescue_attempt_mean(r, profile))
    return _as_output(out, r)


def expected_gradient(r, profile: RescueProfile, side: Optional[str] = None):
    """Derivative of :func:`expected_ratio`.

    ``g`` jumps at the trust-region bound, so evaluating exactly there needs
    ``side='left'`` or ``side='right'``.
    """
    r = _check_r(r)
    d, B = profile.delta, profile.bound_value
    a, b = 1.0 - d, 1.0 + d
    at_bound = r == B
    if np.any(at_bound) and side not in ("left", "right"):
        raise ValueError("expected_gradient is discontinuous at the bound; pass side='left' or 'right'")
    with np.errstate(divide="ignore"):
        if profile.is_upper:
            mid = (B * B / (r * r) - a * a) / (4.0 * d)
            out = np.where(r < B, 1.0, np.where(r < B / a, mid, 0.0))
            if side is not None:
                out = np.where(at_bound, 1.0 if side == "left" else (1.0 - a * a) / (4.0 * d), out)
        else:
            mid = (b * b - B * B / (r * r)) / (4.0 * d)
            out = np.where(r > B, 1.0, np.where(r > B / b, mid, 0.0))
            if side is not None:
                out = np.where(at_bound, (b * b - 1.0) / (4.0 * d) if side == "left" else 1.0, out)
    return _as_output(out, r)


def rescue_probability(r, profile: RescueProfile):
    """Probability that a token at ratio ``r`` keeps its gradient (1 in-bound)."""
    r = _check_r(r)
    d, B = profile.delta, profile.bound_value
    if profile.is_upper:
        p = np.clip((B / r - (1.0 - d)) / (2.0 * d), 0.0, 1.0)
    else:
        p = np.clip(((1.0 + d) - B / r) / (2.0 * d), 0.0, 1.0)
    out = np.where(profile.inside(r), 1.0, p)
    return _as_output(out, r)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    grad_mean: float
    grad_stderr: float
    n: int


def _shard_moments(r: float, profile: RescueProfile, seed: int, index: int, count: int):
    rng = np.random.default_rng([seed, index])
    d, B = profile.delta, profile.bound_value
    z = rng.uniform(1.0 - d, 1.0 + d, size=count)
    rz = r * z
    if profile.is_upper:
        admitted = rz < B
        eff = np.minimum(rz, B)
    else:
        admitted = rz > B
        eff = np.maximum(rz, B)
    grad = np.where(admitted, z, 0.0)
    out = []
    for x in (eff, grad):
        m = x.mean()
        out.append((count, m, float(np.sum((x - m) ** 2))))
    return out


def _merge(parts):
    n, mean, m2 = parts[0]
    for nb, mb, m2b in parts[1:]:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta * delta * n * nb / tot
        n = tot
    return n, mean, m2


def mc_estimate(r: float, profile: RescueProfile, n: int, seed: int, workers: int = 1) -> MCEstimate:
    """Monte Carlo estimate of the expected effective ratio and its gradient.

    The gradient estimator is the pathwise ``E[z * 1{admitted}]``. Draws are
    cut into fixed shards seeded by ``(seed, shard)``, merged in shard order,
    so the result does not depend on ``workers``.
    """
    if n < 1000:
        raise ValueError(f"need at least 1000 draws, got {n}")
    _check_r(r)
    r = float(r)
    if bool(profile.inside(r)):
        return MCEstimate(r, 0.0, 1.0, 0.0, n)
    counts = [min(SHARD_SIZE, n - i) for i in range(0, n, SHARD_SIZE)]
    jobs = [(r, profile, seed, i, c) for i, c in enumerate(counts)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(lambda j: _shard_moments(*j), jobs))
    else:
        shards = [_shard_moments(*j) for j in jobs]
    stats = []
    for which in (0, 1):
        tot, mean, m2 = _merge([s[which] for s in shards])
        stats.append((mean, math.sqrt(m2 / (tot - 1) / tot)))
    (mean, se), (gmean, gse) = stats
    return MCEstimate(float(mean), float(se), float(gmean), float(gse), n)


def regime_side(r: float, profile: RescueProfile) -> str:
    """The one-sided limit matching the regime ``r`` itself belongs to."""
    if profile.is_upper:
        return "left" if r <= profile.bound_value else "right"
    return "right" if r >= profile.bound_value else "left"


CURVE_HEADER = ["r", "f_closed", "g_closed", "f_mc", "f_mc_stderr", "g_mc", "g_mc_stderr", "p_rescue"]


def curve_rows(profile: RescueProfile, grid, mc_samples: int = 0, seed: int = 0, workers: int = 1):
    rows = []
    for i, r in enumerate(np.asarray(grid, dtype=np.float64)):
        r = float(r)
        row = [r, expected_ratio(r, profile), expected_gradient(r, profile, side=regime_side(r, profile))]
        if mc_samples > 0:
            est = mc_estimate(r, profile, mc_samples, seed=seed + i, workers=workers)
            row += [est.mean, est.stderr, est.grad_mean, est.grad_stderr]
        else:
            row += [math.nan] * 4
        row.append(rescue_probability(r, profile))
        rows.append(row)
    return rows


def write_curve_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for row in rows:
            writer.writerow([f"{v:.12g}" for v in row])
