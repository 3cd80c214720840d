#!/usr/bin/env python3
"""
Meter Application for the Smart Meter Network Simulator

A smart meter as a transport application: every logging interval it takes the
next block of its phase channel, decimates it to the current resolution and
hands the encoded packet to the transport. Deliveries reported back through
ACKs are grouped into fixed-size feedback windows; each closed window is
scored by the detector and, for adaptive meters, passed to the controller.
"""

import logging
from typing import List, Optional

from adapt import AdaptiveController
from detect import Detector, DetectorVerdict, FeatureVector
from metrics import DelayRecord
from netsim import AppMessage, ApplicationSource, to_ticks
from packetizer import SendSchedule, encode
from waveform import WaveformConfig, WaveformStream, decimate, make_meter_id

logger = logging.getLogger(__name__)


class MeterSource(ApplicationSource):
    """Periodic waveform sender with receiver-driven feedback windows"""

    def __init__(self, waveform: WaveformConfig, schedule: SendSchedule, phase: int = 0,
                 start: float = 0.0, stop: Optional[float] = None, window_size: int = 20,
                 detector: Optional[Detector] = None, controller: Optional[AdaptiveController] = None):
        if window_size < 2:
            raise ValueError("window_size must be at least 2")
        self.stream = WaveformStream(waveform)
        self.meter_id = make_meter_id(waveform.meter_number, phase)
        self.phase = phase
        self.fixed_schedule = schedule
        self.start = to_ticks(start)
        self.stop = to_ticks(stop) if stop is not None else None
        self.window_size = window_size
        self.detector = detector
        self.controller = controller
        self.seq = 0
        self.window: List[DelayRecord] = []
        self.window_losses = 0
        self.features: List[FeatureVector] = []
        self.verdicts: List[DetectorVerdict] = []

    @property
    def schedule(self) -> SendSchedule:
        """Schedule in force for the next packet"""
        return self.controller.schedule if self.controller else self.fixed_schedule

    def first_send(self) -> Optional[int]:
        return self.start

    def emit(self, now: int) -> Optional[AppMessage]:
        schedule = self.schedule
        block = self.stream.next_channel_block(schedule.base_samples_per_packet, self.phase)
        samples = decimate(block, schedule.resolution)
        data = encode(samples, self.seq, self.meter_id, schedule)
        self.seq += 1
        return AppMessage(data, schedule.resolution.decimation_factor)

    def next_send(self, now: int) -> Optional[int]:
        t = now + to_ticks(self.schedule.logging_interval)
        if self.stop is not None and t >= self.stop:
            return None
        return t

    def on_frame_lost(self, now: int) -> None:
        self.window_losses += 1

    def on_delivery(self, record: DelayRecord, now: int) -> None:
        self.window.append(record)
        if len(self.window) >= self.window_size:
            self._close_window(now)

    def _close_window(self, now: int) -> None:
        x = FeatureVector.from_window(self.window, self.window_losses)
        self.features.append(x)
        self.window = []
        self.window_losses = 0
        if self.detector is None:
            return
        verdict = self.detector.observe(x, closed_ns=now)
        self.verdicts.append(verdict)
        if self.controller is not None:
            self.controller.on_window(verdict, x)
