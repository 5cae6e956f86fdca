"""Deterministic longitudinal simulator for an attacker-led vehicle platoon.

Vehicle 0 is the attacker and drives the platoon; followers 1..N each run a
switching controller: cruise control (PID on speed) when clear of the
vehicle ahead, adaptive cruise control (linear gap/speed-difference law)
when close, with a hysteresis band between the two thresholds so the mode
cannot chatter.  A low-level stage folds the commanded acceleration into a
single actuation scalar in [-1, 1] (negative = brake), and the point-mass
dynamics integrate it with bounded acceleration, linear drag and a
no-reverse clamp using semi-implicit Euler.

The simulation is bitwise deterministic for a given configuration and
attack signal, and terminates at the first bumper contact between any
adjacent pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from .attacks import AttackSignal, PHASE_TRANSIENT, PHASES


class SimulationAbort(RuntimeError):
    """Raised when integration produces non-finite state."""


class Mode(IntEnum):
    CRUISE = 0
    ADAPTIVE = 1


MODE_LABELS = {Mode.CRUISE: "cc", Mode.ADAPTIVE: "acc"}
MODE_FROM_LABEL = {v: k for k, v in MODE_LABELS.items()}


@dataclass(frozen=True)
class VehicleParams:
    """Point-mass vehicle limits: body length, accel/brake caps, linear drag."""

    length: float = 4.5
    a_max: float = 3.0
    b_max: float = 8.0
    drag_coeff: float = 0.05

    def __post_init__(self):
        if self.length <= 0 or self.a_max <= 0 or self.b_max <= 0:
            raise ValueError("length, a_max and b_max must be positive")
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be nonnegative")


@dataclass(frozen=True)
class ControllerGains:
    """PID speed-tracking gains plus the gap law and switching thresholds.

    ``d_desired`` is the center-to-center design gap, ``eps_x``/``eps_v``
    the hysteresis widths, and ``integral_limit`` the PID anti-windup bound
    on the accumulated speed error.  ``actuation_tau`` is the first-order
    response time of the throttle/brake actuators on controller-driven
    vehicles (0 disables the filter); the attacker commands its actuation
    directly and is not filtered.
    """

    pid_kp: float = 1.0
    pid_ki: float = 0.05
    pid_kd: float = 0.1
    acc_kp: float = 0.8
    acc_kv: float = 1.8
    d_desired: float = 11.5
    v_desired: float = 25.0
    eps_x: float = 0.5
    eps_v: float = 0.5
    integral_limit: float = 10.0
    actuation_tau: float = 0.0

    def __post_init__(self):
        if self.eps_x <= 0 or self.eps_v <= 0:
            raise ValueError("hysteresis widths eps_x and eps_v must be positive")
        if self.integral_limit <= 0:
            raise ValueError("integral_limit must be positive")
        if self.actuation_tau < 0:
            raise ValueError("actuation_tau must be nonnegative")


@dataclass
class VehicleState:
    """Longitudinal state of one vehicle plus its controller internals."""

    x: float
    v: float
    mode: Mode = Mode.CRUISE
    pid_integral: float = 0.0
    pid_prev_error: float = 0.0


def pid_accel(
    state: VehicleState, v_desired: float, gains: ControllerGains, dt: float
) -> tuple[float, float, float]:
    """One discrete PID step on the speed error.

    Returns (acceleration command, new integral, new previous error); the
    integral is clamped to +/- integral_limit before use.
    """
    error = v_desired - state.v
    integral = state.pid_integral + error * dt
    lim = gains.integral_limit
    if integral > lim:
        integral = lim
    elif integral < -lim:
        integral = -lim
    derivative = (error - state.pid_prev_error) / dt
    accel = gains.pid_kp * error + gains.pid_ki * integral + gains.pid_kd * derivative
    return accel, integral, error


def acc_accel(lead: VehicleState, ego: VehicleState, gains: ControllerGains) -> float:
    """Gap-regulation law: proportional on gap error, damping on speed difference."""
    gap_error = lead.x - ego.x - gains.d_desired
    return gains.acc_kp * gap_error + gains.acc_kv * (lead.v - ego.v)


def switch_mode(
    current: Mode, lead: VehicleState, ego: VehicleState, gains: ControllerGains
) -> Mode:
    """Hysteretic mode selection between cruise and gap-keeping control.

    Cruise when the gap is at least the design gap plus eps_x or the speed
    is at least the target plus eps_v; gap-keeping when the gap and speed
    are both at or below their thresholds; otherwise hold the current mode.
    """
    gap = lead.x - ego.x
    if gap >= gains.d_desired + gains.eps_x or ego.v >= gains.v_desired + gains.eps_v:
        return Mode.CRUISE
    if gap <= gains.d_desired and ego.v <= gains.v_desired:
        return Mode.ADAPTIVE
    return current


def low_level(accel_command: float, params: VehicleParams) -> float:
    """Map a desired acceleration to one actuation scalar in [-1, 1].

    Positive commands scale against the throttle cap, negative against the
    brake cap, so the sign selects exactly one actuator.
    """
    if accel_command >= 0.0:
        return min(accel_command / params.a_max, 1.0)
    return max(accel_command / params.b_max, -1.0)


def vehicle_step(
    state: VehicleState, actuation: float, params: VehicleParams, dt: float
) -> VehicleState:
    """Advance one vehicle by dt with semi-implicit Euler.

    Acceleration is the actuation scaled by the matching cap minus linear
    drag; speed is clamped at zero (a braking vehicle at rest stays put).
    """
    if actuation >= 0.0:
        accel = actuation * params.a_max - params.drag_coeff * state.v
    else:
        accel = actuation * params.b_max - params.drag_coeff * state.v
    v_new = state.v + accel * dt
    if v_new < 0.0:
        v_new = 0.0
    x_new = state.x + v_new * dt
    return replace(state, x=x_new, v=v_new)


@dataclass(frozen=True)
class ScenarioConfig:
    """Full scenario description: platoon layout, targets, gains, timing.

    ``setpoint_gap`` is bumper to bumper; the center-to-center design gap
    adds one vehicle length.  ``duration`` is the attack window length; in
    the steady phase the window starts once every speed is within
    ``steady_state_threshold`` of the target (or after ``steady_timeout``).
    """

    n_vehicles: int = 4
    setpoint_gap: float = 7.0
    target_speed: float = 25.0
    dt: float = 0.05
    duration: float = 48.0
    attack_phase: str = PHASE_TRANSIENT
    steady_state_threshold: float = 0.2
    steady_timeout: float = 30.0
    seed: int = 0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    pid_kp: float = 1.0
    pid_ki: float = 0.05
    pid_kd: float = 0.1
    acc_kp: float = 0.8
    acc_kv: float = 1.8
    eps_x: float = 0.5
    eps_v: float = 0.5
    integral_limit: float = 10.0
    actuation_tau: float = 0.0

    def validate(self):
        if self.n_vehicles < 3:
            raise ValueError("n_vehicles must be at least 3 (attacker plus two followers)")
        if self.setpoint_gap <= 0:
            raise ValueError("setpoint_gap must be positive")
        if self.target_speed <= 0:
            raise ValueError("target_speed must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.attack_phase not in PHASES:
            raise ValueError(f"attack_phase must be one of {PHASES}")
        if self.steady_state_threshold <= 0:
            raise ValueError("steady_state_threshold must be positive")
        self.vehicle.__post_init__()
        self.gains().__post_init__()

    def gains(self) -> ControllerGains:
        return ControllerGains(
            pid_kp=self.pid_kp,
            pid_ki=self.pid_ki,
            pid_kd=self.pid_kd,
            acc_kp=self.acc_kp,
            acc_kv=self.acc_kv,
            d_desired=self.setpoint_gap + self.vehicle.length,
            v_desired=self.target_speed,
            eps_x=self.eps_x,
            eps_v=self.eps_v,
            integral_limit=self.integral_limit,
            actuation_tau=self.actuation_tau,
        )

    @property
    def d_safe(self) -> float:
        """Center distance at bumper contact."""
        return self.vehicle.length

    def to_json_dict(self) -> dict:
        doc = {
            "n_vehicles": self.n_vehicles,
            "setpoint_gap": self.setpoint_gap,
            "target_speed": self.target_speed,
            "dt": self.dt,
            "duration": self.duration,
            "attack_phase": self.attack_phase,
            "steady_state_threshold": self.steady_state_threshold,
            "steady_timeout": self.steady_timeout,
            "seed": self.seed,
            "vehicle": {
                "length": self.vehicle.length,
                "a_max": self.vehicle.a_max,
                "b_max": self.vehicle.b_max,
                "drag_coeff": self.vehicle.drag_coeff,
            },
            "gains": {
                "pid_kp": self.pid_kp,
                "pid_ki": self.pid_ki,
                "pid_kd": self.pid_kd,
                "acc_kp": self.acc_kp,
                "acc_kv": self.acc_kv,
                "eps_x": self.eps_x,
                "eps_v": self.eps_v,
                "integral_limit": self.integral_limit,
                "actuation_tau": self.actuation_tau,
            },
        }
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ScenarioConfig":
        known = {
            "n_vehicles",
            "setpoint_gap",
            "target_speed",
            "dt",
            "duration",
            "attack_phase",
            "steady_state_threshold",
            "steady_timeout",
            "seed",
            "vehicle",
            "gains",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        kwargs = {k: doc[k] for k in known - {"vehicle", "gains"} if k in doc}
        if "vehicle" in doc:
            kwargs["vehicle"] = VehicleParams(**doc["vehicle"])
        kwargs.update(doc.get("gains", {}))
        config = cls(**kwargs)
        config.validate()
        return config


@dataclass(frozen=True)
class CollisionEvent:
    """First bumper contact between an adjacent pair."""

    leader_index: int
    follower_index: int
    time: float
    location: float
    speed_difference: float

    def __post_init__(self):
        if self.follower_index != self.leader_index + 1:
            raise ValueError("collisions are only defined between adjacent vehicles")

    def to_json_dict(self) -> dict:
        return {
            "leader_index": self.leader_index,
            "follower_index": self.follower_index,
            "time": self.time,
            "location": self.location,
            "speed_difference": self.speed_difference,
        }


@dataclass
class Trajectory:
    """Sampled platoon history: times plus per-vehicle state arrays.

    Columns are ordered attacker-first.  ``attack_start`` is the simulation
    time at which the attack signal engaged.
    """

    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    mode: np.ndarray
    act: np.ndarray
    collisions: list[CollisionEvent]
    attack_start: float = 0.0

    @property
    def n_samples(self) -> int:
        return int(self.times.size)

    @property
    def n_vehicles(self) -> int:
        return int(self.x.shape[1])

    def gap(self, pair_index: int) -> np.ndarray:
        """Center distance between vehicles (i, i+1) over time."""
        return np.abs(self.x[:, pair_index] - self.x[:, pair_index + 1])


def initial_states(config: ScenarioConfig) -> list[VehicleState]:
    """Place the platoon, attacker in front at x = 0.

    Transient runs queue at rest with bumper gaps equal to the setpoint.
    Steady runs are pre-placed at the setpoint gaps at the target speed;
    the attack window then opens at steady-state detection, which with
    these initial speeds fires on the first sample.
    Follower modes are seeded through the switching law so the first
    control tick does not register as a mode change.
    """
    params = config.vehicle
    gains = config.gains()
    transient = config.attack_phase == PHASE_TRANSIENT
    spacing = params.length + config.setpoint_gap
    v0 = 0.0 if transient else config.target_speed
    states = [VehicleState(x=-i * spacing, v=v0) for i in range(config.n_vehicles)]
    for i in range(1, config.n_vehicles):
        states[i].mode = switch_mode(Mode.CRUISE, states[i - 1], states[i], gains)
    return states


def simulate(config: ScenarioConfig, attack: AttackSignal | None) -> Trajectory:
    """Run the platoon under an attack signal (or a benign lead when None).

    The attacker applies the attack actuation directly once the attack
    window opens; before that (and always, when ``attack`` is None) it runs
    its own cruise controller.  Followers run switch -> (PID | gap law) ->
    low-level -> step each tick, with a first-order actuator response
    filter between low-level and the dynamics when ``actuation_tau`` > 0.
    The run stops at the first adjacent contact (that sample records zero
    actuation; no further control is applied) or at the end of the attack
    window.
    """
    config.validate()
    params = config.vehicle
    gains = config.gains()
    dt = config.dt
    n = config.n_vehicles
    length = params.length
    target = config.target_speed
    threshold = config.steady_state_threshold

    states = initial_states(config)
    transient = config.attack_phase == PHASE_TRANSIENT
    attacking = transient
    attack_start = 0.0 if transient else math.nan
    # Applied actuation per vehicle (actuator lag state); steady starts hold
    # the drag-compensating throttle so the platoon does not dip at t = 0.
    hold = 0.0 if transient else min(params.drag_coeff * config.target_speed / params.a_max, 1.0)
    applied = [hold] * n
    alpha = 1.0 if gains.actuation_tau <= 0 else min(dt / gains.actuation_tau, 1.0)

    max_steps = int(round((config.duration + (0.0 if transient else config.steady_timeout)) / dt))
    cap = max_steps + 2
    times = np.empty(cap)
    xs = np.empty((cap, n))
    vs = np.empty((cap, n))
    modes = np.empty((cap, n), dtype=np.int8)
    acts = np.empty((cap, n))
    collisions: list[CollisionEvent] = []

    step = 0
    end_time = config.duration if transient else math.inf
    while True:
        t = step * dt
        if not attacking:
            if all(abs(s.v - target) <= threshold for s in states) or t >= config.steady_timeout:
                attacking = True
                attack_start = t
                end_time = t + config.duration
        # Controls from the current snapshot (synchronous update).
        lead_state = states[0]
        if attacking and attack is not None:
            applied[0] = float(attack(t - attack_start))  # attacker acts directly
        else:
            accel, integral, err = pid_accel(lead_state, target, gains, dt)
            lead_state.pid_integral = integral
            lead_state.pid_prev_error = err
            applied[0] += alpha * (low_level(accel, params) - applied[0])
        follower_updates = []
        for i in range(1, n):
            ego = states[i]
            mode = switch_mode(ego.mode, states[i - 1], ego, gains)
            if mode == Mode.CRUISE:
                accel, integral, err = pid_accel(ego, target, gains, dt)
                follower_updates.append((i, mode, integral, err))
            else:
                accel = acc_accel(states[i - 1], ego, gains)
                follower_updates.append((i, mode, None, None))
            applied[i] += alpha * (low_level(accel, params) - applied[i])
        actuations = applied
        # Record the snapshot together with the control chosen at it.
        times[step] = t
        for i, s in enumerate(states):
            xs[step, i] = s.x
            vs[step, i] = s.v
            acts[step, i] = actuations[i]
        modes[step, 0] = int(states[0].mode)
        for i, mode, integral, err in follower_updates:
            modes[step, i] = int(mode)
            states[i].mode = mode
            if integral is not None:
                states[i].pid_integral = integral
                states[i].pid_prev_error = err
        if t >= end_time - dt * 0.5:
            step += 1
            break
        # Step all vehicles, then check for contact.
        for i, s in enumerate(states):
            states[i] = vehicle_step(s, actuations[i], params, dt)
        step += 1
        t_next = step * dt
        contact = False
        for i in range(n - 1):
            gap = states[i].x - states[i + 1].x
            if gap <= length:
                contact = True
                collisions.append(
                    CollisionEvent(
                        leader_index=i,
                        follower_index=i + 1,
                        time=t_next,
                        location=0.5 * (states[i].x + states[i + 1].x),
                        speed_difference=abs(states[i].v - states[i + 1].v),
                    )
                )
        if contact:
            # Record the contact sample and stop.
            times[step] = t_next
            for i, s in enumerate(states):
                xs[step, i] = s.x
                vs[step, i] = s.v
                acts[step, i] = 0.0
                modes[step, i] = int(s.mode)
            step += 1
            break

    traj = Trajectory(
        times=times[:step].copy(),
        x=xs[:step].copy(),
        v=vs[:step].copy(),
        mode=modes[:step].copy(),
        act=acts[:step].copy(),
        collisions=collisions,
        attack_start=attack_start if not math.isnan(attack_start) else 0.0,
    )
    if not (np.isfinite(traj.x).all() and np.isfinite(traj.v).all()):
        raise SimulationAbort("non-finite vehicle state produced during integration")
    return traj


def detect_collisions(traj: Trajectory, vehicle_length: float) -> list[CollisionEvent]:
    """First sample per adjacent pair with center distance <= vehicle_length."""
    if traj.n_samples == 0:
        raise ValueError("trajectory is empty")
    events = []
    for i in range(traj.n_vehicles - 1):
        gaps = np.abs(traj.x[:, i] - traj.x[:, i + 1])
        hits = np.nonzero(gaps <= vehicle_length)[0]
        if hits.size:
            j = int(hits[0])
            events.append(
                CollisionEvent(
                    leader_index=i,
                    follower_index=i + 1,
                    time=float(traj.times[j]),
                    location=float(0.5 * (traj.x[j, i] + traj.x[j, i + 1])),
                    speed_difference=float(abs(traj.v[j, i] - traj.v[j, i + 1])),
                )
            )
    events.sort(key=lambda e: (e.time, e.leader_index))
    return events


# ---------------------------------------------------------------------------
# Trajectory persistence: JSON Lines, one record per sample, collision
# events appended after the samples.
# ---------------------------------------------------------------------------


def trajectory_records(traj: Trajectory) -> list[dict]:
    records = []
    for s in range(traj.n_samples):
        records.append(
            {
                "t": float(traj.times[s]),
                "vehicles": [
                    {
                        "x": float(traj.x[s, i]),
                        "v": float(traj.v[s, i]),
                        "mode": MODE_LABELS[Mode(int(traj.mode[s, i]))],
                        "act": float(traj.act[s, i]),
                    }
                    for i in range(traj.n_vehicles)
                ],
            }
        )
    for event in traj.collisions:
        records.append({"collision": event.to_json_dict()})
    return records


def trajectory_to_jsonl(traj: Trajectory) -> str:
    lines = [json.dumps(rec, sort_keys=True) for rec in trajectory_records(traj)]
    return "\n".join(lines) + "\n"


def write_trajectory_jsonl(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trajectory_to_jsonl(traj))


def read_trajectory_jsonl(path) -> Trajectory:
    """Load a trajectory written by :func:`write_trajectory_jsonl`.

    The attack onset is not part of the persisted schema, so it reads back
    as zero; replay tooling reconstructs trajectories from configs instead.
    """
    times, rows_x, rows_v, rows_m, rows_a = [], [], [], [], []
    collisions = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "collision" in rec:
                collisions.append(CollisionEvent(**rec["collision"]))
                continue
            times.append(rec["t"])
            rows_x.append([v["x"] for v in rec["vehicles"]])
            rows_v.append([v["v"] for v in rec["vehicles"]])
            rows_m.append([int(MODE_FROM_LABEL[v["mode"]]) for v in rec["vehicles"]])
            rows_a.append([v["act"] for v in rec["vehicles"]])
    if not times:
        raise ValueError(f"no trajectory samples in {path}")
    return Trajectory(
        times=np.asarray(times),
        x=np.asarray(rows_x),
        v=np.asarray(rows_v),
        mode=np.asarray(rows_m, dtype=np.int8),
        act=np.asarray(rows_a),
        collisions=collisions,
    )
