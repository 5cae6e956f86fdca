"""Shared independent oracles and random generators for the test suite.

Everything here is deliberately naive and separate from the library code
paths it checks: the MTL evaluator expands quantifier windows exhaustively,
and the GP oracle inverts the kernel matrix directly.
"""

import math

import numpy as np

from accfalsify import mtl
from accfalsify.attacks import make_search_space
from accfalsify.mtl import (
    Always,
    And,
    Atom,
    Eventually,
    Interval,
    Not,
    Or,
    Trace,
    Until,
)
from accfalsify.platoon import ScenarioConfig

TOP = mtl.DEFAULT_TOP


def brute_rho(f, trace, i, top=TOP):
    """Direct transcription of the quantitative semantics, no caching."""
    times = trace.times
    n = len(trace)
    if isinstance(f, mtl.TrueFormula):
        return top
    if isinstance(f, Atom):
        return f.margin(trace.samples[i])
    if isinstance(f, Not):
        return -brute_rho(f.child, trace, i, top)
    if isinstance(f, And):
        return min(brute_rho(c, trace, i, top) for c in f.children)
    if isinstance(f, Or):
        return max(brute_rho(c, trace, i, top) for c in f.children)
    if isinstance(f, Eventually):
        vals = [
            brute_rho(f.child, trace, j, top)
            for j in range(i, n)
            if f.interval.lo <= times[j] - times[i] <= f.interval.hi
        ]
        return max(vals) if vals else -top
    if isinstance(f, Always):
        vals = [
            brute_rho(f.child, trace, j, top)
            for j in range(i, n)
            if f.interval.lo <= times[j] - times[i] <= f.interval.hi
        ]
        return min(vals) if vals else top
    if isinstance(f, Until):
        best = -top
        for j in range(i, n):
            if not f.interval.lo <= times[j] - times[i] <= f.interval.hi:
                continue
            right = brute_rho(f.right, trace, j, top)
            lefts = [brute_rho(f.left, trace, l, top) for l in range(i, j)]
            prefix = min(lefts) if lefts else top
            best = max(best, min(right, prefix))
        return best
    raise TypeError(type(f))


def channel_atom(channel, threshold):
    return Atom(
        label=f"s{channel} > {threshold:g}",
        margin=lambda sample, c=channel, th=threshold: sample[c] - th,
    )


def random_interval(rng):
    if rng.random() < 0.4:
        return Interval()
    lo = float(rng.uniform(0, 3))
    if rng.random() < 0.3:
        return Interval(lo, math.inf)
    return Interval(lo, lo + float(rng.uniform(0, 4)))


def random_formula(rng, depth, n_channels):
    if depth == 0:
        return channel_atom(rng.integers(n_channels), rng.uniform(-2, 2))
    kind = rng.integers(7)
    if kind == 0:
        return channel_atom(rng.integers(n_channels), rng.uniform(-2, 2))
    if kind == 1:
        return Not(random_formula(rng, depth - 1, n_channels))
    if kind == 2:
        return And(random_formula(rng, depth - 1, n_channels), random_formula(rng, depth - 1, n_channels))
    if kind == 3:
        return Or(random_formula(rng, depth - 1, n_channels), random_formula(rng, depth - 1, n_channels))
    iv = random_interval(rng)
    if kind == 4:
        return Eventually(random_formula(rng, depth - 1, n_channels), iv)
    if kind == 5:
        return Always(random_formula(rng, depth - 1, n_channels), iv)
    return Until(
        random_formula(rng, depth - 1, n_channels),
        random_formula(rng, depth - 1, n_channels),
        iv,
    )


def random_trace(rng, max_len=20, n_channels=3):
    n = int(rng.integers(1, max_len + 1))
    times = np.cumsum(rng.uniform(0.1, 1.0, size=n))
    values = rng.normal(0, 3, size=(n, n_channels))
    return Trace(times, [tuple(row) for row in values])


def direct_gp_oracle(X, y, query, sf2, ls, noise):
    """Independent GP posterior via explicit kernel matrix inversion."""
    X = np.asarray(X, dtype=float)
    query = np.asarray(query, dtype=float)

    def k(a, b):
        return sf2 * math.exp(-0.5 * float(np.sum(((a - b) / ls) ** 2)))

    n = X.shape[0]
    K = np.array([[k(X[i], X[j]) for j in range(n)] for i in range(n)]) + noise * np.eye(n)
    ks = np.array([k(query, X[i]) for i in range(n)])
    K_inv = np.linalg.inv(K)
    mean = ks @ K_inv @ y
    var = sf2 - ks @ K_inv @ ks
    return float(mean), float(var)


def random_scenario_and_attack(rng):
    """Random platoon scenario plus an in-bounds free-form attack."""
    phase = "transient" if rng.random() < 0.5 else "steady"
    config = ScenarioConfig(
        setpoint_gap=float(rng.uniform(2, 15)),
        target_speed=float(rng.choice([20.0, 25.0, 30.0])),
        attack_phase=phase,
        duration=36.0,
    )
    space = make_search_space("nonparam", config.duration, phase=phase)
    return config, space.decode(rng.uniform(-1, 1, size=space.dim))


def mode_switch_gaps_ok(traj, config) -> bool:
    """Between consecutive switches a vehicle traverses eps_x or eps_v."""
    gains = config.gains()
    for i in range(1, traj.n_vehicles):
        switches = np.nonzero(np.diff(traj.mode[:, i].astype(int)) != 0)[0] + 1
        for a, b in zip(switches, switches[1:]):
            gap_a = traj.x[a, i - 1] - traj.x[a, i]
            gap_b = traj.x[b, i - 1] - traj.x[b, i]
            dv = abs(traj.v[b, i] - traj.v[a, i])
            if abs(gap_b - gap_a) < gains.eps_x - 1e-9 and dv < gains.eps_v - 1e-9:
                return False
    return True
