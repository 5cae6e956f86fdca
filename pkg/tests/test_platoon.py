"""Simulator unit tests: controller ops, dynamics, and whole-run properties."""

import json

import numpy as np
import pytest

from accfalsify import mtl
from accfalsify.attacks import make_search_space, nonparam_attack
from oracles import mode_switch_gaps_ok, random_scenario_and_attack

from accfalsify.platoon import (
    CollisionEvent,
    ControllerGains,
    Mode,
    ScenarioConfig,
    Trajectory,
    VehicleParams,
    VehicleState,
    acc_accel,
    detect_collisions,
    initial_states,
    low_level,
    pid_accel,
    read_trajectory_jsonl,
    simulate,
    switch_mode,
    trajectory_to_jsonl,
    vehicle_step,
    write_trajectory_jsonl,
)

GAINS = ControllerGains(d_desired=10.0, v_desired=20.0)


def make_state(x=0.0, v=0.0, mode=Mode.CRUISE, integral=0.0, prev_error=0.0):
    return VehicleState(x=x, v=v, mode=mode, pid_integral=integral, pid_prev_error=prev_error)


class TestPidAccel:
    def test_zero_error_is_a_fixed_point(self):
        state = make_state(v=20.0)
        accel, integral, prev = pid_accel(state, 20.0, GAINS, dt=0.1)
        assert accel == 0.0 and integral == 0.0 and prev == 0.0

    def test_pure_proportional(self):
        gains = ControllerGains(pid_kp=1.0, pid_ki=0.0, pid_kd=0.0, d_desired=10.0, v_desired=20.0)
        accel, _, _ = pid_accel(make_state(v=18.0), 20.0, gains, dt=0.1)
        assert accel == pytest.approx(2.0)

    def test_integral_accumulation_over_ten_steps(self):
        # Hand-iterated: constant error 2 for 10 steps of 0.1 s accumulates
        # integral 2.0, so accel = 0.5*2 + 0.1*2.0 = 1.2.
        gains = ControllerGains(pid_kp=0.5, pid_ki=0.1, pid_kd=0.0, d_desired=10.0, v_desired=20.0)
        state = make_state(v=18.0)
        expected_integral = 0.0
        for _ in range(10):
            accel, integral, prev = pid_accel(state, 20.0, gains, dt=0.1)
            expected_integral += 2.0 * 0.1
            state.pid_integral = integral
            state.pid_prev_error = prev
        assert integral == pytest.approx(expected_integral)
        assert accel == pytest.approx(0.5 * 2.0 + 0.1 * expected_integral)

    def test_integral_clamped_to_antiwindup_bound(self):
        gains = ControllerGains(pid_ki=1.0, integral_limit=2.0, d_desired=10.0, v_desired=20.0)
        state = make_state(v=0.0, integral=1.95)
        _, integral, _ = pid_accel(state, 20.0, gains, dt=1.0)
        assert integral == 2.0


class TestAccAccel:
    def test_equilibrium_is_zero(self):
        lead = make_state(x=10.0, v=20.0)
        ego = make_state(x=0.0, v=20.0)
        assert acc_accel(lead, ego, GAINS) == 0.0

    def test_direct_substitution(self):
        gains = ControllerGains(acc_kp=1.0, acc_kv=2.0, d_desired=10.0, v_desired=20.0)
        lead = make_state(x=12.0, v=19.0)
        ego = make_state(x=0.0, v=20.0)
        assert acc_accel(lead, ego, gains) == pytest.approx(1.0 * 2.0 + 2.0 * (-1.0))

    def test_negative_gap_error(self):
        gains = ControllerGains(acc_kp=0.5, acc_kv=1.0, d_desired=10.0, v_desired=20.0)
        lead = make_state(x=6.0, v=20.0)
        ego = make_state(x=0.0, v=20.0)
        assert acc_accel(lead, ego, gains) == pytest.approx(-2.0)


class TestSwitchMode:
    def test_cruise_at_upper_gap_boundary(self):
        lead = make_state(x=GAINS.d_desired + GAINS.eps_x)
        ego = make_state(x=0.0, v=5.0, mode=Mode.ADAPTIVE)
        assert switch_mode(Mode.ADAPTIVE, lead, ego, GAINS) == Mode.CRUISE

    def test_adaptive_at_lower_boundary(self):
        lead = make_state(x=GAINS.d_desired)
        ego = make_state(x=0.0, v=GAINS.v_desired, mode=Mode.CRUISE)
        assert switch_mode(Mode.CRUISE, lead, ego, GAINS) == Mode.ADAPTIVE

    def test_band_preserves_mode(self):
        lead = make_state(x=GAINS.d_desired + GAINS.eps_x / 2)
        ego = make_state(x=0.0, v=GAINS.v_desired + GAINS.eps_v / 2)
        assert switch_mode(Mode.CRUISE, lead, ego, GAINS) == Mode.CRUISE
        assert switch_mode(Mode.ADAPTIVE, lead, ego, GAINS) == Mode.ADAPTIVE

    def test_fast_ego_forces_cruise(self):
        lead = make_state(x=GAINS.d_desired - 2.0)
        ego = make_state(x=0.0, v=GAINS.v_desired + GAINS.eps_v)
        assert switch_mode(Mode.ADAPTIVE, lead, ego, GAINS) == Mode.CRUISE


class TestLowLevel:
    PARAMS = VehicleParams(a_max=3.0, b_max=8.0)

    def test_zero_maps_to_zero(self):
        assert low_level(0.0, self.PARAMS) == 0.0

    def test_full_throttle_at_a_max(self):
        assert low_level(3.0, self.PARAMS) == 1.0

    def test_brake_clamped_at_minus_one(self):
        assert low_level(-16.0, self.PARAMS) == -1.0

    def test_sign_selects_exactly_one_actuator(self):
        assert low_level(1.5, self.PARAMS) == pytest.approx(0.5)
        assert low_level(-4.0, self.PARAMS) == pytest.approx(-0.5)


class TestVehicleStep:
    def test_braking_at_rest_holds_the_vehicle(self):
        params = VehicleParams()
        state = make_state(x=5.0, v=0.0)
        out = vehicle_step(state, -1.0, params, dt=0.1)
        assert out.v == 0.0 and out.x == 5.0

    def test_ballistic_step(self):
        params = VehicleParams(drag_coeff=0.0)
        out = vehicle_step(make_state(v=10.0), 0.0, params, dt=0.1)
        assert out.v == pytest.approx(10.0)
        assert out.x == pytest.approx(1.0)

    def test_semi_implicit_euler_order(self):
        # Speed updates first, position advances with the new speed.
        params = VehicleParams(a_max=3.0, drag_coeff=0.0)
        out = vehicle_step(make_state(v=10.0), 1.0, params, dt=0.1)
        assert out.v == pytest.approx(10.3)
        assert out.x == pytest.approx(1.03)

    def test_drag_resists_motion(self):
        params = VehicleParams(a_max=3.0, drag_coeff=0.05)
        out = vehicle_step(make_state(v=10.0), 0.0, params, dt=0.1)
        assert out.v == pytest.approx(10.0 - 0.5 * 0.1)


def transient_config(**kwargs):
    defaults = dict(attack_phase="transient", setpoint_gap=7.0, target_speed=25.0)
    defaults.update(kwargs)
    return ScenarioConfig(**defaults)


def crash_maneuver():
    """Brake, full throttle, brake: the transient attack schedule."""
    return nonparam_attack([-1, 1, -1, 0, 0, 0, 0, 0, 0])


class TestSimulate:
    def test_equilibrium_preserved_without_drag(self):
        # Zero-actuation lead, vehicles pre-placed at setpoint and speed,
        # no drag: nothing moves relative to anything.
        config = ScenarioConfig(
            attack_phase="steady",
            vehicle=VehicleParams(drag_coeff=0.0),
            duration=20.0,
        )
        traj = simulate(config, nonparam_attack([0.0, 0.0, 0.0, 0.0]))
        assert not traj.collisions
        gaps = np.diff(-traj.x, axis=1)
        assert np.allclose(gaps, gaps[0], atol=1e-9)
        assert np.all(np.diff(traj.mode.astype(int), axis=0) == 0), "no mode switches expected"
        assert np.allclose(traj.v, config.target_speed)

    def test_determinism_is_bitwise(self):
        config = transient_config()
        attack = crash_maneuver()
        a = simulate(config, attack)
        b = simulate(config, attack)
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.v, b.v)
        assert np.array_equal(a.act, b.act)
        assert a.collisions == b.collisions

    def test_crash_maneuver_defeats_some_hot_band_setpoint(self):
        # The brake/throttle/brake schedule must produce at least one
        # follower-follower crash with the attacker unharmed in 5..9 m.
        wins = []
        for setpoint in (5.0, 6.0, 7.0, 8.0, 9.0):
            traj = simulate(transient_config(setpoint_gap=setpoint), crash_maneuver())
            follower = [c for c in traj.collisions if c.leader_index >= 1]
            attacker = [c for c in traj.collisions if c.leader_index == 0]
            if follower and not attacker:
                wins.append(setpoint)
        assert wins, "expected the canonical maneuver to defeat some setpoint"

    def test_wide_setpoint_resists_random_brake_attacks(self):
        # The brake-pulse families cannot defeat a wide setpoint: the pump
        # that threatens wide gaps needs throttle to rebuild speed.
        rng = np.random.default_rng(41)
        config = ScenarioConfig(setpoint_gap=14.0, target_speed=20.0, attack_phase="steady")
        for family in ("persistent", "intermittent"):
            space = make_search_space(family, config.duration, phase="steady")
            for _ in range(50):
                vec = [rng.uniform(lo, hi) for lo, hi in space.bounds]
                assert not simulate(config, space.decode(vec)).collisions

    def test_ordering_and_no_reverse_on_random_attacks(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            config, sig = random_scenario_and_attack(rng)
            traj = simulate(config, sig)
            assert np.all(traj.v >= 0.0)
            last = traj.n_samples - (2 if traj.collisions else 1)
            assert np.all(np.diff(traj.x[: last + 1], axis=1) < 0.0), "no overtaking"

    def test_steady_phase_engages_attack_at_steady_state(self):
        config = ScenarioConfig(attack_phase="steady")
        traj = simulate(config, crash_maneuver())
        # Initial speeds sit at the target, so the window opens immediately.
        assert traj.attack_start == 0.0

    def test_actuation_exclusivity(self):
        rng = np.random.default_rng(47)
        config, sig = random_scenario_and_attack(rng)
        traj = simulate(config, sig)
        assert np.all(traj.act >= -1.0) and np.all(traj.act <= 1.0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            simulate(ScenarioConfig(n_vehicles=2), None)
        with pytest.raises(ValueError):
            simulate(ScenarioConfig(dt=-0.1), None)
        with pytest.raises(ValueError):
            simulate(ScenarioConfig(attack_phase="warp"), None)

    def test_actuator_response_filter_slows_reaction(self):
        # With a response time constant, follower actuation ramps instead of
        # jumping, so the same brake wave catches the follower earlier and
        # harder.
        attack = nonparam_attack([-1.0, -1.0, 0.0, 0.0], phase="steady")
        sharp = simulate(ScenarioConfig(attack_phase="steady", duration=18.0), attack)
        lagged = simulate(
            ScenarioConfig(attack_phase="steady", duration=18.0, actuation_tau=0.5), attack
        )
        jump_lagged = np.abs(np.diff(lagged.act[:-1, 1])).max()
        assert jump_lagged <= 0.05 / 0.5 + 1e-12, "filtered actuation must ramp"
        assert sharp.collisions and lagged.collisions
        assert lagged.collisions[0].time < sharp.collisions[0].time
        assert lagged.collisions[0].speed_difference > sharp.collisions[0].speed_difference


class TestHysteresis:
    def test_no_chatter_on_random_simulations(self):
        rng = np.random.default_rng(53)
        for _ in range(30):
            config, sig = random_scenario_and_attack(rng)
            traj = simulate(config, sig)
            assert mode_switch_gaps_ok(traj, config)


class TestDetectCollisions:
    @staticmethod
    def straight_line_traj(gaps_over_time):
        """Two vehicles; the follower trails by the given center distances."""
        n = len(gaps_over_time)
        x = np.zeros((n, 2))
        x[:, 0] = 100.0
        x[:, 1] = 100.0 - np.asarray(gaps_over_time)
        return Trajectory(
            times=np.arange(n, dtype=float),
            x=x,
            v=np.tile([20.0, 22.0], (n, 1)),
            mode=np.zeros((n, 2), dtype=np.int8),
            act=np.zeros((n, 2)),
            collisions=[],
        )

    def test_constant_wide_gap_has_no_events(self):
        traj = self.straight_line_traj([9.0] * 10)
        assert detect_collisions(traj, vehicle_length=4.5) == []

    def test_single_event_at_first_crossing(self):
        gaps = np.linspace(2 * 4.5, 0.5 * 4.5, 10)
        traj = self.straight_line_traj(gaps)
        events = detect_collisions(traj, vehicle_length=4.5)
        assert len(events) == 1
        first = int(np.nonzero(gaps <= 4.5)[0][0])
        assert events[0].time == float(first)
        assert events[0].speed_difference == pytest.approx(2.0)

    def test_online_and_offline_detection_agree(self):
        traj = simulate(transient_config(setpoint_gap=7.0), crash_maneuver())
        assert traj.collisions, "expected a crash in this configuration"
        offline = detect_collisions(traj, vehicle_length=4.5)
        assert [(e.leader_index, e.time) for e in offline] == [
            (e.leader_index, e.time) for e in traj.collisions
        ]

    def test_adjacency_enforced(self):
        with pytest.raises(ValueError):
            CollisionEvent(leader_index=0, follower_index=2, time=0.0, location=0.0, speed_difference=0.0)

    def test_empty_trajectory_rejected(self):
        traj = self.straight_line_traj([9.0])
        traj.times = np.empty(0)
        traj.x = np.empty((0, 2))
        with pytest.raises(ValueError):
            detect_collisions(traj, 4.5)


class TestSoundnessLink:
    def test_positive_objective_iff_follower_crash_without_attacker(self):
        rng = np.random.default_rng(59)
        formula_cache = {}
        checked_positive = 0
        for _ in range(40):
            config, sig = random_scenario_and_attack(rng)
            traj = simulate(config, sig)
            key = config.n_vehicles
            formula = formula_cache.setdefault(
                key, mtl.attacker_objective(key - 1, config.d_safe)
            )
            rho = mtl.robustness(formula, mtl.platoon_trace(traj))
            events = detect_collisions(traj, config.d_safe)
            follower = any(e.leader_index >= 1 for e in events)
            attacker = any(e.leader_index == 0 for e in events)
            if abs(rho) > 1e-12:
                assert (rho > 0) == (follower and not attacker)
                checked_positive += rho > 0
        assert checked_positive >= 1, "sample set never exercised a successful attack"


class TestJsonl:
    def test_record_schema_and_round_trip(self, tmp_path):
        traj = simulate(transient_config(setpoint_gap=7.0), crash_maneuver())
        path = tmp_path / "run.jsonl"
        write_trajectory_jsonl(traj, path)
        lines = path.read_text().strip().split("\n")
        first = json.loads(lines[0])
        assert set(first) == {"t", "vehicles"}
        assert set(first["vehicles"][0]) == {"x", "v", "mode", "act"}
        assert first["vehicles"][0]["mode"] in ("cc", "acc")
        tail = json.loads(lines[-1])
        assert "collision" in tail

        back = read_trajectory_jsonl(path)
        assert np.allclose(back.times, traj.times)
        assert np.allclose(back.x, traj.x)
        assert back.collisions == traj.collisions

    def test_serialization_is_deterministic(self):
        traj = simulate(transient_config(), crash_maneuver())
        assert trajectory_to_jsonl(traj) == trajectory_to_jsonl(traj)


class TestInitialStates:
    def test_transient_queue_from_rest(self):
        config = transient_config(setpoint_gap=5.0)
        states = initial_states(config)
        assert all(s.v == 0.0 for s in states)
        spacing = config.vehicle.length + 5.0
        assert [s.x for s in states] == [0.0, -spacing, -2 * spacing, -3 * spacing]
        assert all(s.mode == Mode.ADAPTIVE for s in states[1:])

    def test_steady_phase_starts_at_speed(self):
        states = initial_states(ScenarioConfig(attack_phase="steady", target_speed=30.0))
        assert all(s.v == 30.0 for s in states)
