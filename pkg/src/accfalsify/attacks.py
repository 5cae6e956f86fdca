"""Attacker action signals and their bounded search spaces.

Three families map time to a single actuation scalar in [-1, 1], where -1
is maximum brake and +1 is maximum throttle:

* persistent: a square brake pulse train (amplitude, frequency, onset),
* intermittent: two isolated brake pulses (four times, two amplitudes),
* nonparam: free-form knot values every ``delta`` seconds, joined by a
  monotonicity-preserving cubic Hermite interpolant so the signal never
  overshoots the chosen knot values.

Each family exposes a box search space plus a decoder from raw optimizer
vectors to signals, so global optimizers only ever see bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DELTA = 6.0
FREQ_BOUNDS = (0.05, 1.0)

PHASE_TRANSIENT = "transient"
PHASE_STEADY = "steady"
PHASES = (PHASE_TRANSIENT, PHASE_STEADY)

FAMILY_PERSISTENT = "persistent"
FAMILY_INTERMITTENT = "intermittent"
FAMILY_NONPARAM = "nonparam"
FAMILIES = (FAMILY_PERSISTENT, FAMILY_INTERMITTENT, FAMILY_NONPARAM)


@dataclass(frozen=True)
class PersistentParams:
    """Brake pulse train: amplitude ``c``, frequency ``f`` Hz, onset ``t_a``."""

    c: float
    f: float
    t_a: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"amplitude {self.c} outside [0, 1]")
        if self.f <= 0.0:
            raise ValueError(f"frequency {self.f} must be positive")
        if self.t_a < 0.0:
            raise ValueError(f"activation time {self.t_a} must be >= 0")


@dataclass(frozen=True)
class IntermittentParams:
    """Two brake pulses: -c1 on [t1, t2), -c2 on [t3, t4), zero elsewhere."""

    t1: float
    t2: float
    t3: float
    t4: float
    c1: float
    c2: float

    def __post_init__(self):
        if not 0.0 <= self.t1 <= self.t2 <= self.t3 <= self.t4:
            raise ValueError("pulse times must satisfy 0 <= t1 <= t2 <= t3 <= t4")
        if not (0.0 <= self.c1 <= 1.0 and 0.0 <= self.c2 <= 1.0):
            raise ValueError("pulse amplitudes must lie in [0, 1]")


@dataclass(frozen=True)
class NonparamKnots:
    """Actuation knots spaced ``delta`` seconds apart, each in [-1, 1]."""

    values: tuple[float, ...]
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("knot spacing must be positive")
        if any(not -1.0 <= v <= 1.0 for v in self.values):
            raise ValueError("knot values must lie in [-1, 1]")


def persistent_signal(p: PersistentParams, t):
    """Evaluate the pulse train at time(s) ``t`` (scalar or array).

    Zero before the onset; afterwards the signal alternates between a brake
    half-period at -c and a release half-period at 0, starting with brake.
    """
    t = np.asarray(t, dtype=float)
    phase = (t - p.t_a) * p.f
    braking = (t >= p.t_a) & (np.mod(phase, 1.0) < 0.5)
    out = np.where(braking, -p.c, 0.0)
    return float(out) if out.ndim == 0 else out


def intermittent_signal(p: IntermittentParams, t):
    """Evaluate the two-pulse signal at time(s) ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    out = np.where(
        (t >= p.t1) & (t < p.t2),
        -p.c1,
        np.where((t >= p.t3) & (t < p.t4), -p.c2, 0.0),
    )
    return float(out) if out.ndim == 0 else out


def _pchip_slopes(values: np.ndarray, h: float) -> np.ndarray:
    """Knot derivatives via Fritsch-Carlson limiting on uniform spacing.

    Interior slopes are zero at local extrema, otherwise the secant average
    clamped to three times either adjacent secant; endpoint slopes equal the
    boundary secants.  This keeps every interval monotone between its knots,
    which is what rules out overshoot.
    """
    k = values.size
    d = np.diff(values) / h
    m = np.empty(k)
    m[0] = d[0]
    m[-1] = d[-1]
    for i in range(1, k - 1):
        if d[i - 1] * d[i] <= 0.0:
            m[i] = 0.0
        else:
            avg = 0.5 * (d[i - 1] + d[i])
            cap = 3.0 * min(abs(d[i - 1]), abs(d[i]))
            m[i] = math.copysign(min(abs(avg), cap), avg)
    return m


def pchip_signal(knots: NonparamKnots, t):
    """Evaluate the interpolated knot signal at time(s) ``t``.

    Exact at the knots; holds the last knot value beyond the final knot and
    the first value before t = 0.  Requires at least two knots.
    """
    values = np.asarray(knots.values, dtype=float)
    k = values.size
    if k < 2:
        raise ValueError("interpolation requires at least two knots")
    h = knots.delta
    m = _pchip_slopes(values, h)

    t = np.asarray(t, dtype=float)
    tc = np.clip(t, 0.0, (k - 1) * h)
    idx = np.minimum((tc / h).astype(int), k - 2)
    u = tc / h - idx
    y0 = values[idx]
    y1 = values[idx + 1]
    m0 = m[idx]
    m1 = m[idx + 1]
    u2 = u * u
    u3 = u2 * u
    out = (
        (2 * u3 - 3 * u2 + 1) * y0
        + (u3 - 2 * u2 + u) * h * m0
        + (-2 * u3 + 3 * u2) * y1
        + (u3 - u2) * h * m1
    )
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AttackSignal:
    """Tagged union over the three families, callable as t -> actuation.

    ``phase`` records when the attack engages: from the first sample
    (transient) or from steady-state detection (steady).  Signal time is
    measured from that point.
    """

    family: str
    params: tuple[float, ...]
    delta: float | None = None
    phase: str = PHASE_TRANSIENT

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown attack phase {self.phase!r}")
        self._typed()  # validate eagerly

    def _typed(self):
        if self.family == FAMILY_PERSISTENT:
            if len(self.params) != 3:
                raise ValueError("persistent family takes (c, f, t_a)")
            return PersistentParams(*self.params)
        if self.family == FAMILY_INTERMITTENT:
            if len(self.params) != 6:
                raise ValueError("intermittent family takes (t1, t2, t3, t4, c1, c2)")
            return IntermittentParams(*self.params)
        delta = self.delta if self.delta is not None else DEFAULT_DELTA
        return NonparamKnots(tuple(self.params), delta)

    def __call__(self, t):
        p = self._typed()
        if self.family == FAMILY_PERSISTENT:
            return persistent_signal(p, t)
        if self.family == FAMILY_INTERMITTENT:
            return intermittent_signal(p, t)
        return pchip_signal(p, t)

    def to_json_dict(self) -> dict:
        doc = {"family": self.family, "params": list(self.params), "phase": self.phase}
        doc["delta"] = self.delta if self.family == FAMILY_NONPARAM else None
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AttackSignal":
        try:
            family = doc["family"]
            params = tuple(float(v) for v in doc["params"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed attack document: {exc}") from exc
        delta = doc.get("delta")
        return cls(
            family=family,
            params=params,
            delta=float(delta) if delta is not None else None,
            phase=doc.get("phase", PHASE_TRANSIENT),
        )


def persistent_attack(c: float, f: float, t_a: float, phase: str = PHASE_TRANSIENT) -> AttackSignal:
    return AttackSignal(FAMILY_PERSISTENT, (c, f, t_a), phase=phase)


def intermittent_attack(
    t1: float, t2: float, t3: float, t4: float, c1: float, c2: float, phase: str = PHASE_TRANSIENT
) -> AttackSignal:
    return AttackSignal(FAMILY_INTERMITTENT, (t1, t2, t3, t4, c1, c2), phase=phase)


def nonparam_attack(
    values: Sequence[float], delta: float = DEFAULT_DELTA, phase: str = PHASE_TRANSIENT
) -> AttackSignal:
    return AttackSignal(FAMILY_NONPARAM, tuple(float(v) for v in values), delta=delta, phase=phase)


def knot_count(duration: float, delta: float = DEFAULT_DELTA) -> int:
    """Number of knots covering [0, duration] at spacing delta."""
    return int(math.ceil(duration / delta)) + 1


@dataclass(frozen=True)
class SearchSpace:
    """Box bounds plus a decoder from raw vectors to attack signals."""

    family: str
    bounds: tuple[tuple[float, float], ...]
    decode: Callable[[Sequence[float]], AttackSignal]

    def __post_init__(self):
        if any(lo >= hi for lo, hi in self.bounds):
            raise ValueError("every search dimension needs lower < upper")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def contains(self, point: Sequence[float]) -> bool:
        return len(point) == self.dim and all(
            lo <= v <= hi for v, (lo, hi) in zip(point, self.bounds)
        )


def make_search_space(
    family: str,
    duration: float,
    knots: int | None = None,
    delta: float = DEFAULT_DELTA,
    freq_bounds: tuple[float, float] = FREQ_BOUNDS,
    phase: str = PHASE_TRANSIENT,
) -> SearchSpace:
    """Build the optimizer-facing search space for an attack family.

    Persistent is 3-D (amplitude, frequency, onset); intermittent is 6-D
    with the four pulse times decoded in sorted order so every in-bounds
    vector is feasible; nonparam is one dimension per knot, all in [-1, 1].
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if family == FAMILY_PERSISTENT:
        bounds = ((0.0, 1.0), freq_bounds, (0.0, duration))

        def decode(vec: Sequence[float]) -> AttackSignal:
            c, f, t_a = vec
            return persistent_attack(c, f, t_a, phase=phase)

        return SearchSpace(family, bounds, decode)

    if family == FAMILY_INTERMITTENT:
        bounds = tuple([(0.0, duration)] * 4 + [(0.0, 1.0)] * 2)

        def decode(vec: Sequence[float]) -> AttackSignal:
            times = sorted(vec[:4])
            c1, c2 = vec[4], vec[5]
            return intermittent_attack(*times, c1, c2, phase=phase)

        return SearchSpace(family, bounds, decode)

    if family == FAMILY_NONPARAM:
        k = knots if knots is not None else knot_count(duration, delta)
        if k < 2:
            raise ValueError("nonparam family needs at least two knots")
        bounds = tuple([(-1.0, 1.0)] * k)

        def decode(vec: Sequence[float]) -> AttackSignal:
            return nonparam_attack(vec, delta=delta, phase=phase)

        return SearchSpace(family, bounds, decode)

    raise ValueError(f"unknown attack family {family!r}")
