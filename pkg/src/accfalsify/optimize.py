"""Black-box global optimizers and the falsification loop.

Both optimizers maximize a scalar objective over a box search space under a
fixed evaluation budget, recording every evaluation:

* Bayesian optimization: Gaussian-process surrogate (squared-exponential
  kernel) refit after every evaluation, expected improvement maximized over
  a random candidate set with a few local refinements.
* Cross-entropy: a diagonal Gaussian sampling distribution updated each
  generation to the elite samples' mean and standard deviation (the
  KL-minimizing Gaussian fit), blended with the previous parameters.

``falsify`` wires a decoded attack signal through the simulator and the
attack-objective robustness score, so counterexamples are exactly the
evaluations with positive robustness.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf_vec

from . import mtl
from .attacks import SearchSpace, make_search_space
from .platoon import ScenarioConfig, SimulationAbort, Trajectory, simulate

WORST_ROBUSTNESS = -mtl.DEFAULT_TOP


class ObjectiveFailure(RuntimeError):
    """An objective evaluation failed; the sample scores the worst value."""


class GpFitError(RuntimeError):
    """Kernel matrix stayed ill-conditioned after jitter escalation."""


@dataclass
class ObjectiveSample:
    point: tuple[float, ...]
    robustness: float
    sim_index: int
    crash_meta: dict | None = None


@dataclass
class FalsificationResult:
    """Optimizer history with the best sample and all counterexamples."""

    history: list[ObjectiveSample]
    best: ObjectiveSample
    counterexamples: list[ObjectiveSample]
    budget_used: int
    seed: int
    warnings: list[str] = field(default_factory=list)
    provenance: dict | None = None


def _finish(history: list[ObjectiveSample], seed: int, warnings: list[str]) -> FalsificationResult:
    best = max(history, key=lambda s: s.robustness)
    return FalsificationResult(
        history=history,
        best=best,
        counterexamples=[s for s in history if s.robustness > 0.0],
        budget_used=len(history),
        seed=seed,
        warnings=warnings,
    )


def _call_objective(objective, point, history, warnings):
    try:
        value = float(objective(point))
    except ObjectiveFailure as exc:
        warnings.append(f"objective failure at sample {len(history)}: {exc}")
        value = WORST_ROBUSTNESS
    history.append(ObjectiveSample(point=tuple(point), robustness=value, sim_index=len(history)))


# ---------------------------------------------------------------------------
# Gaussian-process surrogate.
# ---------------------------------------------------------------------------


class GpSurrogate:
    """GP regression with a squared-exponential kernel on a fixed dataset.

    ``length_scales`` may be a scalar or per-dimension array.  The Cholesky
    factor is cached; if factorization fails the jitter is escalated by
    decades up to 1e-2 before giving up.
    """

    def __init__(
        self,
        X=None,
        y=None,
        signal_variance: float = 1.0,
        length_scales=1.0,
        noise_variance: float = 1e-4,
    ):
        self.X = np.empty((0, 1)) if X is None else np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.empty(0) if y is None else np.asarray(y, dtype=float)
        if self.y.size != self.X.shape[0]:
            raise ValueError("X and y lengths differ")
        self.signal_variance = float(signal_variance)
        self.length_scales = np.asarray(length_scales, dtype=float)
        self.noise_variance = float(noise_variance)
        self._chol = None
        self._alpha = None

    @property
    def n_obs(self) -> int:
        return self.y.size

    def _kernel(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        diff = A[:, None, :] - B[None, :, :]
        sq = np.sum((diff / self.length_scales) ** 2, axis=-1)
        return self.signal_variance * np.exp(-0.5 * sq)

    def _factor(self):
        if self._chol is not None:
            return
        K = self._kernel(self.X, self.X)
        jitter = 0.0
        for _ in range(10):
            try:
                self._chol = np.linalg.cholesky(
                    K + (self.noise_variance + jitter) * np.eye(self.n_obs)
                )
                break
            except np.linalg.LinAlgError:
                jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
                if jitter > 1e-2:
                    raise GpFitError("kernel matrix not positive definite after jitter escalation")
        self._alpha = np.linalg.solve(
            self._chol.T, np.linalg.solve(self._chol, self.y)
        )

    def posterior(self, query) -> tuple[float, float]:
        mean, var = self.posterior_batch(np.atleast_2d(np.asarray(query, dtype=float)))
        return float(mean[0]), float(var[0])

    def posterior_batch(self, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.n_obs == 0:
            n = Q.shape[0]
            return np.zeros(n), np.full(n, self.signal_variance)
        self._factor()
        Ks = self._kernel(Q, self.X)
        mean = Ks @ self._alpha
        V = np.linalg.solve(self._chol, Ks.T)
        var = self.signal_variance - np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)

    def log_marginal_likelihood(self) -> float:
        if self.n_obs == 0:
            return 0.0
        self._factor()
        return float(
            -0.5 * self.y @ self._alpha
            - np.sum(np.log(np.diag(self._chol)))
            - 0.5 * self.n_obs * math.log(2.0 * math.pi)
        )


def gp_posterior(surrogate: GpSurrogate, query) -> tuple[float, float]:
    """Posterior mean and variance at one query point (prior when no data)."""
    return surrogate.posterior(query)


_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def expected_improvement(mean: float, variance: float, best_so_far: float) -> float:
    """Closed-form expected improvement over ``best_so_far`` (maximization)."""
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    gain = mean - best_so_far
    if variance == 0.0:
        return max(gain, 0.0)
    sd = math.sqrt(variance)
    z = gain / sd
    cdf = 0.5 * (1.0 + math.erf(z / _SQRT2))
    pdf = math.exp(-0.5 * z * z) / _SQRT2PI
    return gain * cdf + sd * pdf


def latin_hypercube(rng: np.random.Generator, dim: int, n: int) -> np.ndarray:
    """n stratified samples in the unit cube, one stratum per sample per axis."""
    cells = np.stack([rng.permutation(n) for _ in range(dim)], axis=1)
    return (cells + rng.uniform(size=(n, dim))) / n


_LENGTH_SCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8)
_NOISE_FLOOR = 1e-4


def _fit_surrogate(X01: np.ndarray, y: np.ndarray) -> tuple[GpSurrogate, float, float]:
    """Fit hyperparameters on standardized targets over a small grid."""
    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    best = None
    for ls in _LENGTH_SCALE_GRID:
        gp = GpSurrogate(X01, ys, signal_variance=1.0, length_scales=ls, noise_variance=_NOISE_FLOOR)
        try:
            lml = gp.log_marginal_likelihood()
        except GpFitError:
            continue
        if best is None or lml > best[0]:
            best = (lml, gp)
    if best is None:
        raise GpFitError("no length scale produced a usable kernel")
    return best[1], y_mean, y_std


def bayesopt_run(
    objective,
    space: SearchSpace,
    budget: int,
    seed: int,
    init_design: int | None = None,
    candidates_per_dim: int = 200,
    local_refinements: int = 5,
) -> FalsificationResult:
    """Bayesian optimization under a fixed budget of objective evaluations.

    Starts from a Latin-hypercube design of min(10, budget // 5) points
    (overridable), then refits the surrogate and evaluates the expected
    improvement maximizer until the budget is spent.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    dim = space.dim
    lo = np.array([b[0] for b in space.bounds])
    hi = np.array([b[1] for b in space.bounds])
    width = hi - lo

    n_init = init_design if init_design is not None else max(1, min(10, budget // 5))
    n_init = min(n_init, budget)

    history: list[ObjectiveSample] = []
    warnings: list[str] = []
    X01 = latin_hypercube(rng, dim, n_init)
    for row in X01:
        _call_objective(objective, lo + row * width, history, warnings)

    while len(history) < budget:
        X = np.array([s.point for s in history])
        y = np.array([s.robustness for s in history])
        gp, y_mean, y_std = _fit_surrogate((X - lo) / width, y)
        best_std = (np.max(y) - y_mean) / y_std

        n_cand = candidates_per_dim * dim
        cand = rng.uniform(size=(n_cand, dim))
        mean, var = gp.posterior_batch(cand)
        ei = _ei_batch(mean, var, best_std)
        pick = cand[int(np.argmax(ei))]
        best_ei = float(np.max(ei))
        for _ in range(local_refinements):
            local = np.clip(pick + rng.normal(scale=0.05, size=(20, dim)), 0.0, 1.0)
            m2, v2 = gp.posterior_batch(local)
            e2 = _ei_batch(m2, v2, best_std)
            j = int(np.argmax(e2))
            if e2[j] > best_ei:
                best_ei = float(e2[j])
                pick = local[j]
        _call_objective(objective, lo + pick * width, history, warnings)

    return _finish(history, seed, warnings)


def _ei_batch(mean: np.ndarray, var: np.ndarray, best: float) -> np.ndarray:
    sd = np.sqrt(np.maximum(var, 0.0))
    gain = mean - best
    z = np.where(sd > 0, gain / np.where(sd > 0, sd, 1.0), 0.0)
    cdf = 0.5 * (1.0 + _erf_vec(z / _SQRT2))
    pdf = np.exp(-0.5 * z * z) / _SQRT2PI
    return np.where(sd > 0, gain * cdf + sd * pdf, np.maximum(gain, 0.0))


# ---------------------------------------------------------------------------
# Cross-entropy method.
# ---------------------------------------------------------------------------


@dataclass
class CeDistribution:
    """Diagonal Gaussian sampling distribution over the search box."""

    mean: np.ndarray
    std: np.ndarray


def ce_update(points: np.ndarray, values: np.ndarray, elite_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Elite mean and (population) standard deviation, the KL-minimizing fit."""
    n = len(values)
    n_elite = max(1, int(round(elite_frac * n)))
    order = np.argsort(-values, kind="stable")[:n_elite]
    elites = points[order]
    return np.mean(elites, axis=0), np.std(elites, axis=0)


def _sample_truncated(
    rng: np.random.Generator, dist: CeDistribution, lo: np.ndarray, hi: np.ndarray, n: int
) -> np.ndarray:
    """Sample the Gaussian truncated to the box (resample, then clip stragglers)."""
    out = rng.normal(dist.mean, dist.std, size=(n, lo.size))
    for _ in range(50):
        bad = (out < lo) | (out > hi)
        rows = np.any(bad, axis=1)
        if not rows.any():
            break
        out[rows] = rng.normal(dist.mean, dist.std, size=(int(rows.sum()), lo.size))
    return np.clip(out, lo, hi)


def cross_entropy_run(
    objective,
    space: SearchSpace,
    budget: int,
    population: int = 25,
    elite_frac: float = 0.2,
    smoothing: float = 0.7,
    seed: int = 0,
    std_floor: float = 1e-6,
) -> FalsificationResult:
    """Cross-entropy search under a fixed budget of objective evaluations.

    Each generation samples the current distribution truncated to bounds,
    evaluates, and moves the parameters toward the elite fraction's sample
    mean/std; ``smoothing`` retains that share of the previous parameters.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if not 0.0 < elite_frac <= 1.0:
        raise ValueError("elite_frac must be in (0, 1]")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    lo = np.array([b[0] for b in space.bounds])
    hi = np.array([b[1] for b in space.bounds])
    dist = CeDistribution(mean=(lo + hi) / 2.0, std=(hi - lo) / 4.0)

    history: list[ObjectiveSample] = []
    warnings: list[str] = []
    while len(history) < budget:
        m = min(population, budget - len(history))
        points = _sample_truncated(rng, dist, lo, hi, m)
        start = len(history)
        for row in points:
            _call_objective(objective, row, history, warnings)
        values = np.array([s.robustness for s in history[start:]])
        new_mean, new_std = ce_update(points, values, elite_frac)
        dist.mean = smoothing * dist.mean + (1.0 - smoothing) * new_mean
        dist.std = smoothing * dist.std + (1.0 - smoothing) * new_std
        if np.any(dist.std < std_floor):
            dist.std = np.maximum(dist.std, std_floor)
            warnings.append(f"sampling std floored at {std_floor} after sample {len(history)}")

    return _finish(history, seed, warnings)


# ---------------------------------------------------------------------------
# Falsification: optimizer x simulator x robustness.
# ---------------------------------------------------------------------------

OPTIMIZER_BO = "bo"
OPTIMIZER_CE = "ce"
OPTIMIZERS = (OPTIMIZER_BO, OPTIMIZER_CE)

CE_DEFAULTS = {"population": 25, "elite_frac": 0.2, "smoothing": 0.7}
BO_DEFAULTS = {"candidates_per_dim": 200, "local_refinements": 5}


def crash_summary(traj: Trajectory) -> dict | None:
    """Metadata for the first contact in a trajectory, if any."""
    if not traj.collisions:
        return None
    event = traj.collisions[0]
    return {
        "leader_index": event.leader_index,
        "follower_index": event.follower_index,
        "time": event.time,
        "time_since_attack": event.time - traj.attack_start,
        "location": event.location,
        "speed_difference": event.speed_difference,
        "attacker_involved": any(e.leader_index == 0 for e in traj.collisions),
    }


def falsify(
    scenario: ScenarioConfig,
    family: str,
    optimizer: str,
    budget: int = 100,
    seed: int = 0,
    optimizer_options: dict | None = None,
) -> FalsificationResult:
    """Search the attack family for maneuvers that satisfy the objective.

    The objective of a raw point is the robustness of the attacker
    objective on the simulated trajectory of the decoded signal; samples
    with positive robustness are counterexamples.  The result carries full
    provenance (scenario snapshot, optimizer settings, seed, run id) and is
    byte-reproducible for identical inputs.
    """
    scenario.validate()
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    space = make_search_space(family, scenario.duration, phase=scenario.attack_phase)
    formula = mtl.attacker_objective(scenario.n_vehicles - 1, scenario.d_safe)
    meta: list[dict | None] = []

    def objective(point):
        signal = space.decode(point)
        try:
            traj = simulate(scenario, signal)
        except SimulationAbort as exc:
            raise SimulationAbort(f"simulation aborted at point {list(point)}: {exc}") from exc
        meta.append(crash_summary(traj))
        return mtl.robustness(formula, mtl.platoon_trace(traj))

    options = dict(optimizer_options or {})
    if optimizer == OPTIMIZER_BO:
        settings = {**BO_DEFAULTS, **options}
        result = bayesopt_run(objective, space, budget, seed, **settings)
    else:
        settings = {**CE_DEFAULTS, **options}
        result = cross_entropy_run(objective, space, budget, seed=seed, **settings)

    if len(meta) != len(result.history):
        raise RuntimeError("objective bookkeeping out of sync with optimizer history")
    for sample, m in zip(result.history, meta):
        sample.crash_meta = m

    core = {
        "scenario": scenario.to_json_dict(),
        "family": family,
        "optimizer": optimizer,
        "optimizer_settings": settings,
        "budget": budget,
        "seed": seed,
    }
    result.provenance = {**core, "run_id": run_id(core)}
    return result


def run_id(payload: dict) -> str:
    """Deterministic short id derived from the run's resolved inputs."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def result_to_json_dict(result: FalsificationResult, space: SearchSpace | None = None) -> dict:
    """Serializable result document; attacks embedded for counterexamples.

    The best sample always embeds its decoded attack so any stored result
    can be replayed even when the search found no counterexample.
    """
    prov = result.provenance or {}

    def sample_doc(s: ObjectiveSample, with_attack: bool) -> dict:
        doc = {
            "point": list(s.point),
            "robustness": s.robustness,
            "sim_index": s.sim_index,
            "crash": s.crash_meta,
        }
        if with_attack and space is not None:
            doc["attack"] = space.decode(s.point).to_json_dict()
        return doc

    return {
        **prov,
        "budget_used": result.budget_used,
        "warnings": result.warnings,
        "best": sample_doc(result.best, with_attack=True),
        "counterexamples": [sample_doc(s, with_attack=True) for s in result.counterexamples],
        "history": [sample_doc(s, with_attack=False) for s in result.history],
    }


def falsify_document(
    scenario: ScenarioConfig,
    family: str,
    optimizer: str,
    budget: int = 100,
    seed: int = 0,
    optimizer_options: dict | None = None,
) -> dict:
    """Run ``falsify`` and return the serializable result document."""
    result = falsify(scenario, family, optimizer, budget, seed, optimizer_options)
    space = make_search_space(family, scenario.duration, phase=scenario.attack_phase)
    return result_to_json_dict(result, space)
