#!/usr/bin/env python3
"""
Resolution Controller for the Smart Meter Network Simulator

Maps per-window detector verdicts and delivery feedback to the decimation
factor a meter transmits at. Two modes:

* verdict  - Red doubles the decimation, Orange holds, H consecutive Normal
             windows halve it again
* capacity - pick the finest level whose packet rate fits a margin of the
             estimated available rate, moving one step per window

A level chosen here takes effect at the meter's next logging interval.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from detect import DetectorVerdict, FeatureVector, VerdictLevel
from metrics import export_table
from packetizer import SendSchedule
from waveform import ALLOWED_DECIMATIONS, ResolutionLevel

logger = logging.getLogger(__name__)

CONTROL_COLUMNS = ["window_index", "verdict", "old_level", "new_level", "reason"]


class PolicyError(ValueError):
    """Raised for inconsistent controller policies"""


class ControlMode(Enum):
    VERDICT = "verdict"
    CAPACITY = "capacity"


@dataclass(frozen=True)
class ControllerPolicy:
    """Adaptation law parameters; levels are decimation factors"""
    mode: ControlMode = ControlMode.VERDICT
    step_down_levels: int = 1
    hold_windows: int = 10
    min_level: int = 1
    max_level: int = 32
    delay_budget: float = 0.05  # seconds
    margin: float = 0.8
    delay_slack: float = 0.1
    probe_gain: float = 2.5
    switch_interval: bool = False
    slow_interval: float = 0.1

    def __post_init__(self):
        for name in ("min_level", "max_level"):
            if getattr(self, name) not in ALLOWED_DECIMATIONS:
                raise PolicyError(f"{name} must be one of {ALLOWED_DECIMATIONS}")
        if self.min_level > self.max_level:
            raise PolicyError(f"min_level {self.min_level} exceeds max_level {self.max_level}")
        if self.hold_windows < 1:
            raise PolicyError("hold_windows must be at least 1")
        if self.step_down_levels < 1:
            raise PolicyError("step_down_levels must be at least 1")
        if not self.delay_budget > 0:
            raise PolicyError("delay_budget must be positive")
        if not 0 < self.margin <= 1:
            raise PolicyError(f"margin must be within (0, 1], got {self.margin}")
        if self.delay_slack < 0 or not self.probe_gain >= 1:
            raise PolicyError("need delay_slack >= 0 and probe_gain >= 1")
        if not self.slow_interval > 0:
            raise PolicyError("slow_interval must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ControllerPolicy":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise PolicyError(f"unknown policy keys: {sorted(unknown)}")
        values = dict(data)
        if "mode" in values and not isinstance(values["mode"], ControlMode):
            try:
                values["mode"] = ControlMode(values["mode"])
            except ValueError:
                raise PolicyError(f"mode must be one of {[m.value for m in ControlMode]}") from None
        return cls(**values)

    def as_dict(self) -> Dict[str, Any]:
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values["mode"] = self.mode.value
        return values


@dataclass(frozen=True)
class CapacityEstimate:
    rate: float  # bits per second

    def __post_init__(self):
        if not self.rate >= 0:
            raise PolicyError(f"capacity estimate must be non-negative, got {self.rate}")


@dataclass
class ControllerState:
    """Single-owner controller memory"""
    level: ResolutionLevel
    schedule: SendSchedule
    fast_interval: float
    normal_streak: int = 0
    previous_delay: Optional[float] = None
    window_index: int = 0
    reason: str = ""

    @classmethod
    def initial(cls, policy: ControllerPolicy, schedule: SendSchedule) -> "ControllerState":
        d = schedule.resolution.decimation_factor
        d = min(max(d, policy.min_level), schedule.max_aligned_decimation(policy.max_level))
        level = ResolutionLevel(d)
        return cls(level=level, schedule=schedule.with_resolution(level),
                   fast_interval=schedule.logging_interval)


@dataclass(frozen=True)
class ControlDecision:
    window_index: int
    verdict: VerdictLevel
    old_level: int
    new_level: int
    reason: str


def _ceiling(policy: ControllerPolicy, schedule: SendSchedule) -> int:
    return schedule.max_aligned_decimation(policy.max_level)


def capacity_mode_select(policy: ControllerPolicy, estimate: Optional[CapacityEstimate],
                         schedule: SendSchedule) -> ResolutionLevel:
    """Finest aligned level whose packet rate fits margin x estimate"""
    if estimate is None:
        return schedule.resolution
    ceiling = _ceiling(policy, schedule)
    budget = policy.margin * estimate.rate
    for d in ALLOWED_DECIMATIONS:
        if d < policy.min_level or d > ceiling or not schedule.is_aligned(ResolutionLevel(d)):
            continue
        if schedule.payload_rate(ResolutionLevel(d)) <= budget:
            return ResolutionLevel(d)
    return ResolutionLevel(ceiling)


def estimate_capacity(policy: ControllerPolicy, stats: FeatureVector,
                      previous_delay: Optional[float]) -> CapacityEstimate:
    """Delivered rate, penalized when the delay grew since the last window"""
    if previous_delay is not None and stats.mean_delay > previous_delay * (1.0 + policy.delay_slack):
        return CapacityEstimate(stats.throughput * previous_delay / stats.mean_delay)
    return CapacityEstimate(stats.throughput * policy.probe_gain)


def _verdict_step(policy: ControllerPolicy, state: ControllerState, verdict: DetectorVerdict,
                  stats: FeatureVector) -> int:
    d = state.level.decimation_factor
    if verdict.level == VerdictLevel.RED:
        state.normal_streak = 0
        ceiling = _ceiling(policy, state.schedule)
        new = min(d << policy.step_down_levels, ceiling)
        state.reason = "red: step down" if new != d else "red: at coarsest level"
        return new
    if verdict.level == VerdictLevel.ORANGE:
        state.normal_streak = 0
        state.reason = "orange: hold"
        return d
    if stats.mean_delay > policy.delay_budget:
        state.normal_streak = 0
        state.reason = "normal over delay budget: hold"
        return d
    state.normal_streak += 1
    if state.normal_streak < policy.hold_windows:
        state.reason = f"normal {state.normal_streak}/{policy.hold_windows}"
        return d
    state.normal_streak = 0
    new = max(d >> 1, policy.min_level)
    state.reason = "recovered: step up" if new != d else "recovered: at finest level"
    return new


def _capacity_step(policy: ControllerPolicy, state: ControllerState, verdict: DetectorVerdict,
                   stats: FeatureVector) -> int:
    d = state.level.decimation_factor
    estimate = estimate_capacity(policy, stats, state.previous_delay)
    target = capacity_mode_select(policy, estimate, state.schedule).decimation_factor
    if verdict.level == VerdictLevel.RED:
        state.normal_streak = 0
    if target > d:
        state.normal_streak = 0
        state.reason = f"capacity {estimate.rate:.0f} bps: step down"
        return d << 1
    if target < d and verdict.level != VerdictLevel.RED:
        state.normal_streak += 1
        if state.normal_streak >= policy.hold_windows:
            state.normal_streak = 0
            state.reason = f"capacity {estimate.rate:.0f} bps: step up"
            return d >> 1
        state.reason = f"capacity {estimate.rate:.0f} bps: probing {state.normal_streak}/{policy.hold_windows}"
        return d
    if target == d:
        state.normal_streak = 0
    state.reason = f"capacity {estimate.rate:.0f} bps: hold"
    return d


def _switch_interval(policy: ControllerPolicy, state: ControllerState, verdict: DetectorVerdict,
                     level: ResolutionLevel) -> SendSchedule:
    schedule = state.schedule
    slow = policy.slow_interval
    if verdict.level == VerdictLevel.RED and schedule.logging_interval < slow:
        candidate = SendSchedule(slow, ResolutionLevel(1), schedule.sampling_period)
        d = min(level.decimation_factor, candidate.max_aligned_decimation(policy.max_level))
        state.reason += f", interval {slow}s"
        return candidate.with_resolution(ResolutionLevel(d))
    if level.decimation_factor == policy.min_level and schedule.logging_interval != state.fast_interval:
        fast = SendSchedule(state.fast_interval, ResolutionLevel(1), schedule.sampling_period)
        if fast.is_aligned(level):
            state.reason += f", interval {state.fast_interval}s"
            return fast.with_resolution(level)
    return schedule.with_resolution(level)


def on_window(policy: ControllerPolicy, state: ControllerState, verdict: DetectorVerdict,
              window_stats: FeatureVector) -> ResolutionLevel:
    """Advance the controller by one feedback window and return the next level"""
    if policy.mode == ControlMode.VERDICT:
        d = _verdict_step(policy, state, verdict, window_stats)
    else:
        d = _capacity_step(policy, state, verdict, window_stats)
    d = min(max(d, policy.min_level), _ceiling(policy, state.schedule))
    level = ResolutionLevel(d)

    if policy.switch_interval:
        state.schedule = _switch_interval(policy, state, verdict, level)
    else:
        state.schedule = state.schedule.with_resolution(level)
    level = state.schedule.resolution
    state.level = level
    state.previous_delay = window_stats.mean_delay
    state.window_index += 1
    return level


class AdaptiveController:
    """Policy plus state plus the decision log for one meter flow"""

    def __init__(self, policy: ControllerPolicy, schedule: SendSchedule):
        self.policy = policy
        self.state = ControllerState.initial(policy, schedule)
        self.decisions: List[ControlDecision] = []

    @property
    def level(self) -> ResolutionLevel:
        return self.state.level

    @property
    def schedule(self) -> SendSchedule:
        return self.state.schedule

    def on_window(self, verdict: DetectorVerdict, window_stats: FeatureVector) -> ResolutionLevel:
        old = self.state.level.decimation_factor
        index = self.state.window_index
        level = on_window(self.policy, self.state, verdict, window_stats)
        self.decisions.append(ControlDecision(index, verdict.level, old, level.decimation_factor,
                                              self.state.reason))
        if level.decimation_factor != old:
            logger.debug("Window %d: decimation %d -> %d (%s)", index, old,
                         level.decimation_factor, self.state.reason)
        return level

    def level_changes(self) -> int:
        return sum(1 for d in self.decisions if d.old_level != d.new_level)

    def export_decisions(self, path: Union[str, Path]) -> Path:
        rows = [(d.window_index, d.verdict.value, d.old_level, d.new_level, d.reason)
                for d in self.decisions]
        return export_table(rows, CONTROL_COLUMNS, path)
