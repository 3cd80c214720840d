#!/usr/bin/env python3
"""
Tests for the resolution controller
"""

import numpy as np
import pytest

from adapt import (CONTROL_COLUMNS, AdaptiveController, CapacityEstimate, ControllerPolicy, ControllerState,
                   ControlMode, PolicyError, capacity_mode_select, estimate_capacity, on_window)
from detect import DetectorVerdict, FeatureVector, VerdictLevel
from packetizer import SendSchedule
from waveform import ResolutionLevel

FAST = SendSchedule(0.01)
SLOW = SendSchedule(0.1)

NORMAL = DetectorVerdict(VerdictLevel.NORMAL, 0.0, (1.0, 2.0))
ORANGE = DetectorVerdict(VerdictLevel.ORANGE, 1.5, (1.0, 2.0))
RED = DetectorVerdict(VerdictLevel.RED, 3.0, (1.0, 2.0))
VERDICTS = (NORMAL, ORANGE, RED)


def stats(mean_delay: float = 0.001, throughput: float = 1e6) -> FeatureVector:
    return FeatureVector(mean_delay, 0.0001, 0.0, throughput)


def state_at(d: int, schedule: SendSchedule = FAST, policy: ControllerPolicy = ControllerPolicy()):
    return ControllerState.initial(policy, schedule.with_resolution(ResolutionLevel(d)))


# -- verdict mode --------------------------------------------------------------

def test_red_doubles_decimation():
    policy = ControllerPolicy()
    state = state_at(1)
    assert on_window(policy, state, RED, stats()) == ResolutionLevel(2)
    assert state.schedule.samples_per_packet == 40


def test_red_at_coarsest_level_is_clamped():
    policy = ControllerPolicy()
    state = state_at(32, SLOW)
    assert on_window(policy, state, RED, stats()) == ResolutionLevel(32)
    assert state.reason == "red: at coarsest level"


def test_red_is_clamped_to_aligned_ceiling():
    policy = ControllerPolicy()
    state = state_at(16, FAST)
    assert on_window(policy, state, RED, stats()) == ResolutionLevel(16)


def test_hold_windows_then_step_up():
    policy = ControllerPolicy(hold_windows=10)
    state = state_at(4)
    levels = [on_window(policy, state, NORMAL, stats()).decimation_factor for _ in range(10)]
    assert levels == [4] * 9 + [2]
    assert state.normal_streak == 0


def test_orange_holds_and_resets_streak():
    policy = ControllerPolicy(hold_windows=3)
    state = state_at(4)
    on_window(policy, state, NORMAL, stats())
    on_window(policy, state, NORMAL, stats())
    assert on_window(policy, state, ORANGE, stats()) == ResolutionLevel(4)
    assert state.normal_streak == 0
    levels = [on_window(policy, state, NORMAL, stats()).decimation_factor for _ in range(3)]
    assert levels == [4, 4, 2]


def test_normal_over_delay_budget_holds():
    policy = ControllerPolicy(hold_windows=1, delay_budget=0.05)
    state = state_at(4)
    assert on_window(policy, state, NORMAL, stats(mean_delay=0.2)) == ResolutionLevel(4)
    assert state.reason == "normal over delay budget: hold"
    assert on_window(policy, state, NORMAL, stats(mean_delay=0.01)) == ResolutionLevel(2)


def test_step_down_levels():
    policy = ControllerPolicy(step_down_levels=2)
    state = state_at(1)
    assert on_window(policy, state, RED, stats()) == ResolutionLevel(4)


def test_min_level_floor():
    policy = ControllerPolicy(min_level=2, hold_windows=1)
    state = state_at(1, policy=policy)
    assert state.level == ResolutionLevel(2)
    assert on_window(policy, state, NORMAL, stats()) == ResolutionLevel(2)


# -- capacity mode -------------------------------------------------------------

@pytest.mark.parametrize("rate,expected", [(100e6, 1), (0.5e6, 4), (0.0, 16)])
def test_capacity_select_fast_schedule(rate, expected):
    policy = ControllerPolicy(mode=ControlMode.CAPACITY)
    assert capacity_mode_select(policy, CapacityEstimate(rate), FAST) == ResolutionLevel(expected)


def test_capacity_select_clamps_to_max():
    policy = ControllerPolicy(mode=ControlMode.CAPACITY)
    assert capacity_mode_select(policy, CapacityEstimate(0.0), SLOW) == ResolutionLevel(32)
    assert capacity_mode_select(policy, None, SLOW.with_resolution(ResolutionLevel(8))) == ResolutionLevel(8)


def test_capacity_select_rate_oracle():
    policy = ControllerPolicy(mode=ControlMode.CAPACITY, margin=0.8)
    for d, expected_rate in [(1, 908_800), (2, 460_800), (4, 236_800), (8, 124_800), (16, 68_800)]:
        assert FAST.payload_rate(ResolutionLevel(d)) == pytest.approx(expected_rate)
    assert capacity_mode_select(policy, CapacityEstimate(600_000), FAST) == ResolutionLevel(2)


def test_capacity_select_is_monotone():
    rng = np.random.default_rng(31)
    policy = ControllerPolicy(mode=ControlMode.CAPACITY)
    for _ in range(1000):
        low, high = sorted(rng.uniform(0.0, 2e6, 2))
        schedule = FAST if rng.random() < 0.5 else SLOW
        d_low = capacity_mode_select(policy, CapacityEstimate(float(low)), schedule).decimation_factor
        d_high = capacity_mode_select(policy, CapacityEstimate(float(high)), schedule).decimation_factor
        assert d_high <= d_low


def test_estimate_capacity():
    policy = ControllerPolicy(mode=ControlMode.CAPACITY, delay_slack=0.1, probe_gain=2.5)
    assert estimate_capacity(policy, stats(0.001, 1e6), None).rate == pytest.approx(2.5e6)
    assert estimate_capacity(policy, stats(0.00105, 1e6), 0.001).rate == pytest.approx(2.5e6)
    assert estimate_capacity(policy, stats(0.01, 1e6), 0.001).rate == pytest.approx(1e5)
    with pytest.raises(PolicyError):
        CapacityEstimate(-1.0)


def test_capacity_mode_steps_one_level_at_a_time():
    policy = ControllerPolicy(mode=ControlMode.CAPACITY, hold_windows=2)
    state = state_at(1, policy=policy)
    assert on_window(policy, state, NORMAL, stats(0.001)) == ResolutionLevel(1)
    assert on_window(policy, state, NORMAL, stats(0.01)) == ResolutionLevel(2)
    assert on_window(policy, state, NORMAL, stats(0.1)) == ResolutionLevel(4)
    # Delay stops growing: the probe estimate asks for full resolution again.
    assert on_window(policy, state, NORMAL, stats(0.1)) == ResolutionLevel(4)
    assert on_window(policy, state, NORMAL, stats(0.1)) == ResolutionLevel(2)


# -- properties --------------------------------------------------------------

def random_run(mode: ControlMode, seed: int):
    rng = np.random.default_rng(seed)
    policy = ControllerPolicy(mode=mode, hold_windows=int(rng.integers(1, 6)),
                              switch_interval=bool(rng.random() < 0.3))
    controller = AdaptiveController(policy, FAST)
    verdicts = []
    for _ in range(60):
        verdict = VERDICTS[int(rng.choice(3, p=[0.7, 0.15, 0.15]))]
        window = stats(float(rng.uniform(0.0005, 0.08)), float(rng.uniform(1e4, 2e6)))
        controller.on_window(verdict, window)
        verdicts.append(verdict.level)
    return policy, controller, verdicts


@pytest.mark.parametrize("mode", list(ControlMode))
def test_level_moves_at_most_one_step_per_window(mode):
    for seed in range(500):
        policy, controller, _ = random_run(mode, seed)
        for decision in controller.decisions:
            ratio = max(decision.old_level, decision.new_level) // min(decision.old_level, decision.new_level)
            assert ratio in (1, 2)


@pytest.mark.parametrize("mode", list(ControlMode))
def test_no_step_up_within_hold_windows_of_red(mode):
    for seed in range(500):
        policy, controller, verdicts = random_run(mode, seed)
        last_red = None
        for index, decision in enumerate(controller.decisions):
            if verdicts[index] == VerdictLevel.RED:
                last_red = index
            if decision.new_level < decision.old_level and last_red is not None:
                assert index - last_red >= policy.hold_windows


# -- interval switching --------------------------------------------------------

def test_switch_interval_on_red_and_back():
    policy = ControllerPolicy(switch_interval=True, slow_interval=0.1, hold_windows=2)
    controller = AdaptiveController(policy, FAST)
    controller.on_window(RED, stats())
    assert controller.schedule.logging_interval == 0.1
    assert controller.level == ResolutionLevel(2)
    assert controller.schedule.samples_per_packet == 400
    controller.on_window(NORMAL, stats())
    controller.on_window(NORMAL, stats())
    assert controller.level == ResolutionLevel(1)
    assert controller.schedule.logging_interval == 0.01


# -- policy and controller plumbing ------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"min_level": 3},
    {"min_level": 8, "max_level": 4},
    {"hold_windows": 0},
    {"step_down_levels": 0},
    {"delay_budget": 0.0},
    {"margin": 1.5},
    {"probe_gain": 0.5},
    {"slow_interval": 0.0},
])
def test_policy_validation(kwargs):
    with pytest.raises(PolicyError):
        ControllerPolicy(**kwargs)


def test_policy_from_dict():
    policy = ControllerPolicy.from_dict({"mode": "capacity", "hold_windows": 4})
    assert policy.mode == ControlMode.CAPACITY
    assert policy.as_dict()["mode"] == "capacity"
    assert ControllerPolicy.from_dict(policy.as_dict()) == policy
    with pytest.raises(PolicyError):
        ControllerPolicy.from_dict({"mode": "psychic"})
    with pytest.raises(PolicyError):
        ControllerPolicy.from_dict({"hold": 3})


def test_controller_logs_decisions(tmp_path):
    controller = AdaptiveController(ControllerPolicy(hold_windows=1), FAST)
    controller.on_window(RED, stats())
    controller.on_window(ORANGE, stats())
    controller.on_window(NORMAL, stats())
    assert [(d.old_level, d.new_level) for d in controller.decisions] == [(1, 2), (2, 2), (2, 1)]
    assert controller.level_changes() == 2
    lines = controller.export_decisions(tmp_path / "control.csv").read_text().splitlines()
    assert lines[0] == ",".join(CONTROL_COLUMNS)
    assert lines[1] == "0,Red,1,2,red: step down"
    assert lines[2] == "1,Orange,2,2,orange: hold"
