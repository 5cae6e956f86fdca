"""Metric temporal logic over sampled traces, with quantitative semantics.

Formulas are immutable ASTs over real-valued atomic predicates.  Evaluating
a formula against a trace yields a signed robustness margin: positive means
the trace satisfies the formula, negative means it violates it, zero is
indeterminate.  Semantics are discrete-time over the recorded samples; time
windows are truncated at the end of the trace.

The module also builds the two specifications used for attack scoring: the
adversarial goal (some follower pair eventually comes within the safety
distance) and the attacker's own safety requirement (the gap behind the
attacker always exceeds the safety distance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

# Sentinel robustness for the trivially-true formula; a large finite margin
# keeps min/max arithmetic total (no inf - inf surprises downstream).
DEFAULT_TOP = 1e9


class Formula:
    """Base class for MTL formula nodes."""

    def __and__(self, other: "Formula") -> "Formula":
        return And(self, other)

    def __or__(self, other: "Formula") -> "Formula":
        return Or(self, other)

    def __invert__(self) -> "Formula":
        return Not(self)

    def __str__(self) -> str:
        return format_formula(self)


@dataclass(frozen=True)
class Interval:
    """Closed time interval [lo, hi]; hi may be math.inf."""

    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        if self.lo < 0 or self.hi < self.lo:
            raise ValueError(f"invalid interval [{self.lo}, {self.hi}]")

    @property
    def unbounded(self) -> bool:
        return self.lo == 0.0 and math.isinf(self.hi)


UNBOUNDED = Interval()


class TrueFormula(Formula):
    __slots__ = ()


TRUE = TrueFormula()


class Atom(Formula):
    """Atomic predicate with a signed margin function over one sample.

    ``margin(sample) > 0`` means the predicate holds at that sample.
    ``vector_margin``, when given, maps the trace's whole sample container
    to a margin array in one call; it must agree with ``margin`` pointwise.
    """

    __slots__ = ("label", "margin", "vector_margin", "negated_label")

    def __init__(
        self,
        label: str,
        margin: Callable[[Any], float],
        vector_margin: Callable[[Any], np.ndarray] | None = None,
        negated_label: str | None = None,
    ):
        self.label = label
        self.margin = margin
        self.vector_margin = vector_margin
        self.negated_label = negated_label


class Not(Formula):
    __slots__ = ("child",)

    def __init__(self, child: Formula):
        self.child = child


class And(Formula):
    __slots__ = ("children",)

    def __init__(self, *children: Formula):
        if not children:
            raise ValueError("And requires at least one operand")
        self.children = children


class Or(Formula):
    __slots__ = ("children",)

    def __init__(self, *children: Formula):
        if not children:
            raise ValueError("Or requires at least one operand")
        self.children = children


class Eventually(Formula):
    __slots__ = ("child", "interval")

    def __init__(self, child: Formula, interval: Interval = UNBOUNDED):
        self.child = child
        self.interval = interval


class Always(Formula):
    __slots__ = ("child", "interval")

    def __init__(self, child: Formula, interval: Interval = UNBOUNDED):
        self.child = child
        self.interval = interval


class Until(Formula):
    __slots__ = ("left", "right", "interval")

    def __init__(self, left: Formula, right: Formula, interval: Interval = UNBOUNDED):
        self.left = left
        self.right = right
        self.interval = interval


class Trace:
    """Timestamped sample sequence for formula evaluation.

    ``samples`` is any sequence indexable by sample position; atoms receive
    ``samples[i]``.  Timestamps must be strictly increasing.
    """

    __slots__ = ("times", "samples")

    def __init__(self, times: Sequence[float], samples: Sequence[Any]):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("trace requires a non-empty 1-D timestamp array")
        if len(samples) != times.size:
            raise ValueError("timestamps and samples must have equal length")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("timestamps must be strictly increasing")
        self.times = times
        self.samples = samples

    def __len__(self) -> int:
        return int(self.times.size)


def robustness(formula: Formula, trace: Trace, at: int = 0, top: float = DEFAULT_TOP) -> float:
    """Quantitative robustness of ``formula`` on ``trace`` at sample ``at``.

    Atom: its margin.  Not: negation.  And/Or: min/max.  Always/Eventually:
    min/max of the child over samples whose time offset falls in the
    operator interval.  Until: max over candidate switch points of
    min(right there, min of left strictly before).  Windows that extend
    past the end of the trace are truncated; an empty window yields
    ``+top`` for Always and ``-top`` for Eventually/Until.
    """
    n = len(trace)
    if not 0 <= at < n:
        raise IndexError(f"sample index {at} out of range for trace of length {n}")
    times = trace.times
    memo: dict[tuple[int, int], float] = {}
    margins: dict[int, np.ndarray] = {}
    vectors: dict[int, np.ndarray | None] = {}

    def atom_margins(atom: Atom) -> np.ndarray:
        arr = margins.get(id(atom))
        if arr is None:
            if atom.vector_margin is not None:
                arr = np.asarray(atom.vector_margin(trace.samples), dtype=float)
                if arr.shape != (n,):
                    raise ValueError(f"vector margin of {atom.label!r} has wrong shape")
            else:
                arr = np.fromiter((atom.margin(trace.samples[i]) for i in range(n)), dtype=float, count=n)
            margins[id(atom)] = arr
        return arr

    def vector_values(node: Formula) -> np.ndarray | None:
        # Per-sample robustness array for temporal-free subtrees; None when
        # the subtree contains a temporal operator.
        key = id(node)
        if key in vectors:
            return vectors[key]
        out: np.ndarray | None
        if isinstance(node, TrueFormula):
            out = np.full(n, top)
        elif isinstance(node, Atom):
            out = atom_margins(node)
        elif isinstance(node, Not):
            sub = vector_values(node.child)
            out = None if sub is None else -sub
        elif isinstance(node, (And, Or)):
            subs = [vector_values(c) for c in node.children]
            if any(s is None for s in subs):
                out = None
            elif isinstance(node, And):
                out = np.minimum.reduce(subs)
            else:
                out = np.maximum.reduce(subs)
        else:
            out = None
        vectors[key] = out
        return out

    def window(i: int, iv: Interval) -> tuple[int, int]:
        lo = int(np.searchsorted(times, times[i] + iv.lo, side="left"))
        if math.isinf(iv.hi):
            hi = n
        else:
            hi = int(np.searchsorted(times, times[i] + iv.hi, side="right"))
        return lo, hi

    def ev(node: Formula, i: int) -> float:
        key = (id(node), i)
        cached = memo.get(key)
        if cached is not None:
            return cached
        if isinstance(node, TrueFormula):
            val = top
        elif isinstance(node, Atom):
            val = float(atom_margins(node)[i])
        elif isinstance(node, Not):
            val = -ev(node.child, i)
        elif isinstance(node, And):
            val = min(ev(c, i) for c in node.children)
        elif isinstance(node, Or):
            val = max(ev(c, i) for c in node.children)
        elif isinstance(node, (Eventually, Always)):
            lo, hi = window(i, node.interval)
            vec = vector_values(node.child)
            if lo >= hi:
                val = top if isinstance(node, Always) else -top
            elif vec is not None:
                val = float(np.min(vec[lo:hi]) if isinstance(node, Always) else np.max(vec[lo:hi]))
            else:
                vals = (ev(node.child, j) for j in range(lo, hi))
                val = min(vals) if isinstance(node, Always) else max(vals)
        elif isinstance(node, Until):
            lo, hi = window(i, node.interval)
            best = -top
            prefix = top  # min of left over [i, j); empty prefix is top
            for j in range(i, hi):
                if j >= lo:
                    cand = min(ev(node.right, j), prefix)
                    if cand > best:
                        best = cand
                prefix = min(prefix, ev(node.left, j))
            val = best
        else:
            raise TypeError(f"unknown formula node {type(node).__name__}")
        memo[key] = val
        return val

    return ev(formula, at)


# ---------------------------------------------------------------------------
# Specification builders for the platoon attack objective.
# ---------------------------------------------------------------------------


def gap_atom(pair_index: int, d_safe: float) -> Atom:
    """Predicate ``gap between vehicles (i, i+1) exceeds d_safe``.

    Samples are per-time position vectors ordered attacker-first; the margin
    is the center distance minus the safety distance.
    """
    i = pair_index

    def margin(sample) -> float:
        return abs(float(sample[i]) - float(sample[i + 1])) - d_safe

    def vector_margin(samples) -> np.ndarray:
        arr = np.asarray(samples, dtype=float)
        return np.abs(arr[:, i] - arr[:, i + 1]) - d_safe

    return Atom(
        label=f"gap{i} > {d_safe:g}",
        margin=margin,
        vector_margin=vector_margin,
        negated_label=f"gap{i} <= {d_safe:g}",
    )


def adv_spec(n_followers: int, d_safe: float) -> Formula:
    """Eventually some follower pair violates the safety distance.

    Robustness is positive exactly when two vehicles other than the attacker
    come within ``d_safe`` of each other at some sample.
    """
    if n_followers < 2:
        raise ValueError("adversarial goal needs at least two followers")
    violations = [Not(gap_atom(i, d_safe)) for i in range(1, n_followers)]
    body = violations[0] if len(violations) == 1 else Or(*violations)
    return Eventually(body)


def safe_spec(d_safe: float) -> Formula:
    """The gap behind the attacker always exceeds the safety distance."""
    return Always(gap_atom(0, d_safe))


def attacker_objective(n_followers: int, d_safe: float) -> Formula:
    """Followers crash while the attacker stays uninvolved.

    Robustness is min(adversarial goal, attacker safety); a successful
    attack scores strictly positive.
    """
    return And(adv_spec(n_followers, d_safe), safe_spec(d_safe))


def platoon_trace(trajectory) -> Trace:
    """Adapt a simulator trajectory (``times``/``x`` arrays) for evaluation."""
    return Trace(trajectory.times, trajectory.x)


# ---------------------------------------------------------------------------
# Compact textual rendering for logs and CLI echo (not parsed back).
# ---------------------------------------------------------------------------


def _interval_str(iv: Interval) -> str:
    if iv.unbounded:
        return ""
    hi = "inf" if math.isinf(iv.hi) else f"{iv.hi:g}"
    return f"[{iv.lo:g},{hi}]"


def format_formula(f: Formula) -> str:
    if isinstance(f, TrueFormula):
        return "true"
    if isinstance(f, Atom):
        return f.label
    if isinstance(f, Not):
        child = f.child
        if isinstance(child, Atom) and child.negated_label:
            return child.negated_label
        return f"!({format_formula(child)})"
    if isinstance(f, And):
        return " & ".join(_wrap(c, {Or}) for c in f.children)
    if isinstance(f, Or):
        return " | ".join(format_formula(c) for c in f.children)
    if isinstance(f, Eventually):
        return f"F{_interval_str(f.interval)}({format_formula(f.child)})"
    if isinstance(f, Always):
        return f"G{_interval_str(f.interval)}({format_formula(f.child)})"
    if isinstance(f, Until):
        return (
            f"({format_formula(f.left)} U{_interval_str(f.interval)} "
            f"{format_formula(f.right)})"
        )
    raise TypeError(f"unknown formula node {type(f).__name__}")


def _wrap(f: Formula, needs_parens: set[type]) -> str:
    text = format_formula(f)
    if type(f) in needs_parens:
        return f"({text})"
    return text
