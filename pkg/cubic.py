#!/usr/bin/env python3
"""
CUBIC congestion control state for the simulated transport

Window growth follows W(t) = C*(t - K)^3 + W_max measured in segments, with
K = cbrt(W_max * (1 - beta) / C). No TCP-friendly region, no fast convergence.
"""

import math
from dataclasses import dataclass

DEFAULT_MSS = 1460
CUBIC_C = 0.4
CUBIC_BETA = 0.7


def cube_root(x: float) -> float:
    return math.copysign(abs(x) ** (1.0 / 3.0), x)


@dataclass
class CubicState:
    """Per-flow congestion window bookkeeping, all sizes in bytes"""
    cwnd: float
    mss: int = DEFAULT_MSS
    w_max: float = 0.0
    ssthresh: float = math.inf
    epoch_start: float = 0.0
    K: float = 0.0
    C: float = CUBIC_C
    beta: float = CUBIC_BETA
    rtt_estimate: float = 0.0
    in_flight: int = 0
    loss_events: int = 0

    def __post_init__(self):
        if self.mss <= 0:
            raise ValueError("mss must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must be within (0, 1)")
        if self.C <= 0:
            raise ValueError("C must be positive")
        self.cwnd = max(float(self.cwnd), float(self.mss))

    @classmethod
    def initial(cls, mss: int = DEFAULT_MSS, initial_segments: int = 10,
                C: float = CUBIC_C, beta: float = CUBIC_BETA) -> "CubicState":
        return cls(cwnd=float(initial_segments * mss), mss=mss, C=C, beta=beta)

    @property
    def in_slow_start(self) -> bool:
        return self.cwnd < self.ssthresh

    def can_send(self, frame_bytes: int) -> bool:
        """An empty pipe always admits one frame"""
        return self.in_flight == 0 or self.in_flight + frame_bytes <= self.cwnd


def compute_k(w_max: float, mss: int, C: float = CUBIC_C, beta: float = CUBIC_BETA) -> float:
    """Seconds from the reduction until the window regains w_max"""
    return cube_root((w_max / mss) * (1.0 - beta) / C)


def cubic_window(state: CubicState, t: float) -> float:
    """Target window in bytes at absolute time t"""
    elapsed = t - state.epoch_start - state.K
    segments = state.C * elapsed ** 3 + state.w_max / state.mss
    return state.mss * max(1.0, segments)


def on_ack(state: CubicState, acked_bytes: int, now: float) -> CubicState:
    """Grow the window for newly acknowledged data"""
    if acked_bytes <= 0:
        return state
    if state.in_slow_start:
        state.cwnd = min(state.cwnd + acked_bytes, state.ssthresh) if math.isfinite(state.ssthresh) \
            else state.cwnd + acked_bytes
        return state

    target = cubic_window(state, now)
    if target > state.cwnd:
        # Close the gap proportionally to the share of the window just acknowledged.
        state.cwnd += (target - state.cwnd) * min(1.0, acked_bytes / state.cwnd)
    return state


def on_loss(state: CubicState, now: float) -> CubicState:
    """Multiplicative decrease and a new growth epoch"""
    state.w_max = state.cwnd
    state.cwnd = max(float(state.mss), state.cwnd * state.beta)
    state.ssthresh = state.cwnd
    state.epoch_start = now
    state.K = compute_k(state.w_max, state.mss, state.C, state.beta)
    state.loss_events += 1
    return state
