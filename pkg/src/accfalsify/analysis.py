"""Post-hoc analysis of falsification results.

Turns stored run documents into crash statistics tables, setpoint-by-speed
counterexample heatmaps, plot-ready time-space CSV exports, and clustered
maneuver reports (k-means with k chosen by the elbow rule, cross-checked
against density clustering).  All outputs are plain rows/arrays with stable
column order; no plotting here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .platoon import Trajectory

MS_TO_KMH = 3.6


@dataclass(frozen=True)
class CrashRecord:
    """One crash drawn from a falsification run, tagged with its scenario."""

    run_id: str
    leader_index: int
    follower_index: int
    time_to_collision: float
    location: float
    speed_difference: float  # km/h
    attacker_involved: bool
    setpoint: float
    speed: float
    phase: str
    optimizer: str
    family: str

    def scenario_key(self, keys: tuple[str, ...]) -> tuple:
        return tuple(getattr(self, k) for k in keys)


def records_from_result(doc: dict, counterexamples_only: bool = False) -> list[CrashRecord]:
    """Extract crash records from a stored falsification result document."""
    scenario = doc.get("scenario", {})
    tags = {
        "run_id": doc.get("run_id", ""),
        "setpoint": float(scenario.get("setpoint_gap", math.nan)),
        "speed": float(scenario.get("target_speed", math.nan)),
        "phase": scenario.get("attack_phase", ""),
        "optimizer": doc.get("optimizer", ""),
        "family": doc.get("family", ""),
    }
    samples = doc.get("counterexamples" if counterexamples_only else "history", [])
    records = []
    for sample in samples:
        crash = sample.get("crash")
        if not crash:
            continue
        records.append(
            CrashRecord(
                leader_index=int(crash["leader_index"]),
                follower_index=int(crash["follower_index"]),
                time_to_collision=float(crash.get("time_since_attack", crash["time"])),
                location=float(crash["location"]),
                speed_difference=float(crash["speed_difference"]) * MS_TO_KMH,
                attacker_involved=bool(crash["attacker_involved"]),
                **tags,
            )
        )
    return records


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std())  # population std


def crash_statistics(
    records: list[CrashRecord], group_by: tuple[str, ...] = ("family", "optimizer")
) -> list[dict]:
    """Per-group crash counts and mean/std summaries.

    Rows carry: crash count, how many involved the first follower pair,
    time to collision, collision location, and speed difference (km/h),
    each as mean and population standard deviation.
    """
    groups: dict[tuple, list[CrashRecord]] = {}
    for rec in records:
        groups.setdefault(rec.scenario_key(group_by), []).append(rec)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        recs = groups[key]
        pair12 = sum(1 for r in recs if (r.leader_index, r.follower_index) == (1, 2))
        ttc_mean, ttc_std = _mean_std([r.time_to_collision for r in recs])
        loc_mean, loc_std = _mean_std([r.location for r in recs])
        dv_mean, dv_std = _mean_std([r.speed_difference for r in recs])
        row = dict(zip(group_by, key))
        row.update(
            {
                "crashes": len(recs),
                "pair12_crashes": pair12,
                "pair12_pct": 100.0 * pair12 / len(recs) if recs else None,
                "ttc_mean": ttc_mean,
                "ttc_std": ttc_std,
                "location_mean": loc_mean,
                "location_std": loc_std,
                "speed_diff_mean": dv_mean,
                "speed_diff_std": dv_std,
            }
        )
        rows.append(row)
    return rows


def format_statistics_row(row: dict) -> str:
    """Render a statistics row in `count, pair (pct%), mean (std), ...` style."""
    if row["crashes"] == 0:
        return "0"
    return (
        f"{row['crashes']}, {row['pair12_crashes']} ({row['pair12_pct']:.0f}%), "
        f"{row['ttc_mean']:.1f} ({row['ttc_std']:.1f}), "
        f"{row['location_mean']:.1f} ({row['location_std']:.1f}), "
        f"{row['speed_diff_mean']:.1f} ({row['speed_diff_std']:.1f})"
    )


@dataclass
class SweepGrid:
    """Counterexample counts on the (setpoint, speed) grid."""

    setpoints: list[float]
    speeds: list[float]
    counts: np.ndarray  # shape (len(setpoints), len(speeds))
    warnings: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def max_cell(self) -> tuple[float, float, int]:
        """(setpoint, speed, count) of the densest cell; first by row order on ties."""
        idx = int(np.argmax(self.counts))
        i, j = divmod(idx, len(self.speeds))
        return self.setpoints[i], self.speeds[j], int(self.counts[i, j])


def heatmap(records: list[CrashRecord], setpoints: list[float], speeds: list[float]) -> SweepGrid:
    """Count records per (setpoint, speed) cell; off-axis records are warned."""
    counts = np.zeros((len(setpoints), len(speeds)), dtype=int)
    sp_index = {v: i for i, v in enumerate(setpoints)}
    sv_index = {v: j for j, v in enumerate(speeds)}
    warnings = []
    for rec in records:
        i = sp_index.get(rec.setpoint)
        j = sv_index.get(rec.speed)
        if i is None or j is None:
            warnings.append(
                f"record from run {rec.run_id} at ({rec.setpoint}, {rec.speed}) outside declared axes"
            )
            continue
        counts[i, j] += 1
    return SweepGrid(list(setpoints), list(speeds), counts, warnings)


def time_space_export(traj: Trajectory) -> list[tuple]:
    """Long-format rows (t, vehicle, x, v, actuation) for plotting."""
    rows = []
    for s in range(traj.n_samples):
        for i in range(traj.n_vehicles):
            rows.append(
                (
                    float(traj.times[s]),
                    i,
                    float(traj.x[s, i]),
                    float(traj.v[s, i]),
                    float(traj.act[s, i]),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Clustering.
# ---------------------------------------------------------------------------


def kmeans(
    points, k: int, seed: int = 0, max_iter: int = 100
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignments, centroids, inertia); deterministic for a given
    seed, stopping at an assignment fixpoint or after ``max_iter`` rounds.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")
    rng = np.random.Generator(np.random.PCG64(seed))

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    closest = np.sum((pts - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[c] = pts[rng.integers(n)]
            continue
        probs = closest / total
        centroids[c] = pts[rng.choice(n, p=probs)]
        closest = np.minimum(closest, np.sum((pts - centroids[c]) ** 2, axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        for c in range(k):
            members = new_assign == c
            if members.any():
                centroids[c] = pts[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its centroid.
                far = int(np.argmax(d2[np.arange(n), new_assign]))
                centroids[c] = pts[far]
                new_assign[far] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    d2 = np.sum((pts - centroids[assign]) ** 2, axis=1)
    return assign, centroids, float(d2.sum())


NOISE = -1


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; labels in scan order, noise labeled -1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be at least 1")
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    neighbors = [np.nonzero(d2[i] <= eps * eps)[0] for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(n, NOISE)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cluster
        frontier = list(neighbors[i])
        while frontier:
            j = frontier.pop()
            if labels[j] == NOISE:
                labels[j] = cluster
                if core[j]:
                    frontier.extend(neighbors[j])
        cluster += 1
    return labels


@dataclass
class ElbowCurve:
    inertias: list[float]
    violations: list[int] = field(default_factory=list)  # k where the curve rose


def elbow_curve(points, k_max: int, seed: int = 0, restarts: int = 5) -> ElbowCurve:
    """Best-of-restarts k-means inertia for k = 1..k_max."""
    pts = np.asarray(points, dtype=float)
    if k_max > pts.shape[0]:
        raise ValueError("k_max exceeds the number of points")
    inertias = []
    for k in range(1, k_max + 1):
        best = min(
            kmeans(pts, k, seed=seed + 97 * k + r)[2] for r in range(restarts)
        )
        inertias.append(best)
    violations = [k + 2 for k in range(len(inertias) - 1) if inertias[k + 1] > inertias[k] + 1e-9]
    return ElbowCurve(inertias, violations)


def elbow_k(inertias: list[float]) -> int:
    """k with the largest second difference of the inertia curve."""
    if len(inertias) < 2 or inertias[0] <= 1e-12:
        return 1
    if len(inertias) < 3:
        return 2 if inertias[1] < inertias[0] else 1
    diffs = [
        inertias[k - 1] - 2.0 * inertias[k] + inertias[k + 1]
        for k in range(1, len(inertias) - 1)
    ]
    if max(diffs) <= 1e-12:
        return 1
    return int(np.argmax(diffs)) + 2  # diff index 0 corresponds to k = 2


@dataclass
class ClusterConfig:
    k_max: int = 6
    k_override: int | None = None
    eps: float = 0.5
    min_pts: int = 5
    restarts: int = 5
    seed: int = 0


@dataclass
class ClusterReport:
    """Clustered maneuver summary: per-cluster per-knot mean and spread."""

    k: int
    assignments: np.ndarray
    means: np.ndarray  # (k, dim)
    stds: np.ndarray  # (k, dim)
    sizes: list[int]
    inertia_curve: list[float]
    dbscan_clusters: int
    dbscan_noise: int
    median: np.ndarray  # per-knot median over all points
    dense_structure: bool


def cluster_maneuvers(vectors, config: ClusterConfig | None = None) -> ClusterReport:
    """Cluster successful attack vectors and summarize each cluster.

    The cluster count comes from the elbow of the inertia curve (capped by
    the point count), with a density-clustering pass reported alongside; a
    manual override wins when provided.  Fewer than two vectors produce a
    single-cluster report.
    """
    cfg = config or ClusterConfig()
    pts = np.asarray(vectors, dtype=float)
    if pts.ndim != 2:
        raise ValueError("expected a 2-D array of equal-length attack vectors")
    n = pts.shape[0]
    median = np.median(pts, axis=0) if n else np.empty(0)
    if n < 2:
        return ClusterReport(
            k=min(n, 1),
            assignments=np.zeros(n, dtype=int),
            means=pts.copy(),
            stds=np.zeros_like(pts),
            sizes=[n] * min(n, 1),
            inertia_curve=[0.0] * min(n, 1),
            dbscan_clusters=min(n, 1),
            dbscan_noise=0,
            median=median,
            dense_structure=bool(n),
        )

    labels_db = dbscan(pts, cfg.eps, cfg.min_pts)
    n_db = int(labels_db.max()) + 1 if labels_db.max() >= 0 else 0
    noise = int(np.sum(labels_db == NOISE))

    k_max = min(cfg.k_max, n)
    curve = elbow_curve(pts, k_max, seed=cfg.seed, restarts=cfg.restarts)
    k = cfg.k_override if cfg.k_override is not None else elbow_k(curve.inertias)
    k = max(1, min(k, n))

    assignments, _, _ = kmeans(pts, k, seed=cfg.seed)
    means = np.vstack([pts[assignments == c].mean(axis=0) for c in range(k)])
    stds = np.vstack([pts[assignments == c].std(axis=0) for c in range(k)])
    sizes = [int(np.sum(assignments == c)) for c in range(k)]
    return ClusterReport(
        k=k,
        assignments=assignments,
        means=means,
        stds=stds,
        sizes=sizes,
        inertia_curve=curve.inertias,
        dbscan_clusters=n_db,
        dbscan_noise=noise,
        median=median,
        dense_structure=n_db > 0,
    )


# ---------------------------------------------------------------------------
# CSV writers (stable, documented column order).
# ---------------------------------------------------------------------------

STATISTICS_COLUMNS = (
    "crashes",
    "pair12_crashes",
    "pair12_pct",
    "ttc_mean",
    "ttc_std",
    "location_mean",
    "location_std",
    "speed_diff_mean",
    "speed_diff_std",
)


def write_statistics_csv(rows: list[dict], group_by: tuple[str, ...], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(group_by) + list(STATISTICS_COLUMNS))
        for row in rows:
            writer.writerow([row[k] for k in group_by] + [row[c] for c in STATISTICS_COLUMNS])


def write_heatmap_csv(grid: SweepGrid, path) -> None:
    """Row-major grid: one row per setpoint, one column per speed."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setpoint"] + [f"{s:g}" for s in grid.speeds])
        for i, sp in enumerate(grid.setpoints):
            writer.writerow([f"{sp:g}"] + [int(c) for c in grid.counts[i]])


def write_time_space_csv(rows: list[tuple], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "vehicle", "x", "v", "act"])
        writer.writerows(rows)


def write_cluster_csv(report: ClusterReport, path) -> None:
    """Per-cluster per-knot rows plus the overall per-knot median."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster", "size", "knot", "mean", "std", "median_overall"])
        for c in range(report.k):
            for j in range(report.means.shape[1]):
                writer.writerow(
                    [
                        c,
                        report.sizes[c],
                        j,
                        report.means[c, j],
                        report.stds[c, j],
                        report.median[j],
                    ]
                )
