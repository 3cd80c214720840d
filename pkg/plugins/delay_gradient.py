#!/usr/bin/env python3
"""
Delay Gradient Detector Plugin

Flags congestion from the trend of the window mean delay: the delay is
exponentially smoothed, and the least-squares slope over the last few windows
is compared against Orange/Red slope thresholds (seconds per window).
"""

from collections import deque
from typing import Any, Deque, Dict, Optional

import numpy as np

from detect import DetectorError, DetectorVerdict, FeatureVector, VerdictLevel, classify
from plugin_system import DetectorPlugin, PluginInfo, PluginType


class DelayGradientDetector(DetectorPlugin):
    """Trendline slope of smoothed mean delay"""

    name = "delay_gradient"

    @classmethod
    def plugin_info(cls) -> PluginInfo:
        return PluginInfo(
            name=cls.name,
            version="1.0.0",
            description="Trendline filter over smoothed per-window mean delay",
            author="Simulator Team",
            plugin_type=PluginType.DETECTOR,
            dependencies=["numpy"],
        )

    def __init__(self, params: Optional[Dict[str, Any]] = None):
        super().__init__(params)
        unknown = set(self.params) - {"trend_windows", "smoothing", "orange", "red"}
        if unknown:
            raise DetectorError(f"unknown delay_gradient parameters: {sorted(unknown)}")
        self.trend_windows = int(self.params.get("trend_windows", 8))
        self.smoothing = float(self.params.get("smoothing", 0.9))
        self.orange = float(self.params.get("orange", 2e-4))
        self.red = float(self.params.get("red", 1e-3))
        if self.trend_windows < 2:
            raise DetectorError("trend_windows must be at least 2")
        if not 0 <= self.smoothing < 1:
            raise DetectorError("smoothing must be within [0, 1)")
        if not 0 < self.orange < self.red:
            raise DetectorError("need 0 < orange < red")
        self.smoothed: Optional[float] = None
        self.points: Deque[float] = deque(maxlen=self.trend_windows)

    def trendline(self) -> Optional[float]:
        if len(self.points) < self.trend_windows:
            return None
        xs = np.arange(len(self.points), dtype=float)
        slope, _ = np.polyfit(xs, np.array(self.points), 1)
        return float(slope)

    def update(self, x: FeatureVector) -> DetectorVerdict:
        if self.smoothed is None:
            self.smoothed = x.mean_delay
        else:
            self.smoothed = self.smoothing * self.smoothed + (1.0 - self.smoothing) * x.mean_delay
        self.points.append(self.smoothed)

        slope = self.trendline()
        if slope is None:
            return DetectorVerdict(VerdictLevel.NORMAL, 0.0, (self.orange, self.red))
        return classify(max(0.0, slope), self.orange, self.red)
