#!/usr/bin/env python3
"""
Waveform Generator for the Smart Meter Network Simulator

Synthesizes the three-phase voltage and current samples a smart meter logs,
and reduces their time resolution by decimation.

Measurement noise comes from numpy `default_rng(seed)`, the PCG64 bit
generator, drawing standard normals; one seed always yields the same samples.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ALLOWED_DECIMATIONS: Tuple[int, ...] = (1, 2, 4, 8, 16, 32)
PHASE_COUNT = 3
PHASE_BITS = 2
PHASE_ANGLES: Tuple[float, ...] = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1
MAX_METER_NUMBER = (2 ** 16 - 1) >> PHASE_BITS

CSV_COLUMNS = ["t_offset_us", "phase", "voltage_mv", "current_ma"]


class WaveformError(ValueError):
    """Raised for invalid waveform parameters"""


@dataclass(frozen=True)
class LoadProfile:
    """Current drawn on one phase"""
    current_amplitude: float  # peak amperes
    phase_offset: float = 0.0  # radians, relative to the phase voltage


@dataclass(frozen=True)
class WaveformConfig:
    """Parameters of the sinusoidal source"""
    line_voltage_rms: float = 208.0
    frequency: float = 60.0
    sampling_period: float = 125e-6
    load_profiles: Tuple[LoadProfile, ...] = (
        LoadProfile(12.0, -0.35), LoadProfile(11.0, -0.30), LoadProfile(13.0, -0.40))
    noise_stddev: float = 0.0
    seed: int = 0
    meter_number: int = 1

    def __post_init__(self):
        if not self.line_voltage_rms > 0:
            raise WaveformError(f"line_voltage_rms must be positive, got {self.line_voltage_rms}")
        if not self.frequency > 0:
            raise WaveformError(f"frequency must be positive, got {self.frequency}")
        if not self.sampling_period >= 1e-6:
            raise WaveformError(f"sampling_period must be at least 1 us, got {self.sampling_period}")
        if abs(self.sampling_period * 1e6 - round(self.sampling_period * 1e6)) > 1e-6:
            raise WaveformError("sampling_period must be a whole number of microseconds")
        # Nyquist: at least two samples per cycle.
        if self.sampling_period >= 1.0 / (2.0 * self.frequency):
            raise WaveformError("sampling_period too coarse for the line frequency")
        if len(self.load_profiles) != PHASE_COUNT:
            raise WaveformError(f"need {PHASE_COUNT} load profiles, got {len(self.load_profiles)}")
        if self.noise_stddev < 0:
            raise WaveformError("noise_stddev must be non-negative")
        if not 0 <= self.meter_number <= MAX_METER_NUMBER:
            raise WaveformError(f"meter_number must be within 0..{MAX_METER_NUMBER}")
        peak_current_ma = max(p.current_amplitude for p in self.load_profiles) * 1000 * (1 + 6 * self.noise_stddev)
        if self.peak_phase_voltage * 1000 * (1 + 6 * self.noise_stddev) > INT32_MAX or peak_current_ma > INT32_MAX:
            raise WaveformError("amplitudes do not fit 32-bit milli-unit samples")

    @property
    def peak_phase_voltage(self) -> float:
        """Peak line-to-neutral voltage in volts"""
        return self.line_voltage_rms / math.sqrt(3.0) * math.sqrt(2.0)

    @property
    def sampling_period_us(self) -> int:
        return int(round(self.sampling_period * 1e6))

    @classmethod
    def from_dict(cls, data: Dict, **overrides) -> "WaveformConfig":
        """Build from a defaults/scenario mapping"""
        values = dict(data)
        values.update(overrides)
        profiles = values.pop("load_profiles", None)
        if profiles is not None:
            values["load_profiles"] = tuple(
                p if isinstance(p, LoadProfile) else LoadProfile(**p) for p in profiles)
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise WaveformError(f"unknown waveform keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class Sample:
    """One quantized measurement of one phase"""
    t_offset: int  # microseconds since stream start
    voltage: int  # millivolts
    current: int  # milliamperes
    meter_id: int  # meter_number << 2 | phase

    @property
    def phase(self) -> int:
        return self.meter_id & ((1 << PHASE_BITS) - 1)

    @property
    def meter_number(self) -> int:
        return self.meter_id >> PHASE_BITS


def make_meter_id(meter_number: int, phase: int) -> int:
    """Pack meter number and phase index into the 16-bit sample identifier"""
    if not 0 <= phase < PHASE_COUNT:
        raise WaveformError(f"phase must be 0..{PHASE_COUNT - 1}, got {phase}")
    if not 0 <= meter_number <= MAX_METER_NUMBER:
        raise WaveformError(f"meter_number must be within 0..{MAX_METER_NUMBER}")
    return (meter_number << PHASE_BITS) | phase


@dataclass(frozen=True)
class ResolutionLevel:
    """Decimation factor applied to the base sample stream"""
    decimation_factor: int = 1

    def __post_init__(self):
        if self.decimation_factor not in ALLOWED_DECIMATIONS:
            raise WaveformError(
                f"decimation must be one of {ALLOWED_DECIMATIONS}, got {self.decimation_factor}")

    def effective_period(self, sampling_period: float) -> float:
        return sampling_period * self.decimation_factor

    def coarser(self, steps: int = 1, limit: int = ALLOWED_DECIMATIONS[-1]) -> "ResolutionLevel":
        return ResolutionLevel(min(self.decimation_factor << steps, limit))

    def finer(self, steps: int = 1, limit: int = ALLOWED_DECIMATIONS[0]) -> "ResolutionLevel":
        return ResolutionLevel(max(self.decimation_factor >> steps, limit))


@dataclass
class SampleBlock:
    """Column-oriented run of samples for one or more phases"""
    t_offset: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    meter_id: np.ndarray

    def __len__(self) -> int:
        return int(self.t_offset.shape[0])

    def __getitem__(self, index) -> "SampleBlock":
        return SampleBlock(self.t_offset[index], self.voltage[index],
                           self.current[index], self.meter_id[index])

    def to_samples(self) -> List[Sample]:
        return [Sample(int(t), int(v), int(i), int(m)) for t, v, i, m in
                zip(self.t_offset.tolist(), self.voltage.tolist(),
                    self.current.tolist(), self.meter_id.tolist())]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleBlock":
        return cls(
            np.array([s.t_offset for s in samples], dtype=np.int64),
            np.array([s.voltage for s in samples], dtype=np.int64),
            np.array([s.current for s in samples], dtype=np.int64),
            np.array([s.meter_id for s in samples], dtype=np.int64),
        )


class WaveformStream:
    """Incremental generator; consecutive blocks equal one long generate() call"""

    def __init__(self, config: WaveformConfig):
        self.config = config
        self.index = 0
        self._rng = np.random.default_rng(config.seed)
        self._omega = 2.0 * math.pi * config.frequency
        self._v_peak = config.peak_phase_voltage
        self._i_peak = np.array([p.current_amplitude for p in config.load_profiles])
        self._i_phase = np.array([p.phase_offset for p in config.load_profiles])
        self._angles = np.array(PHASE_ANGLES)
        self._ids = np.array([make_meter_id(config.meter_number, ph) for ph in range(PHASE_COUNT)],
                             dtype=np.int64)

    def next_block(self, count: int) -> SampleBlock:
        """Next `count` instants for all phases, interleaved phase-major per instant"""
        if count < 0:
            raise WaveformError("sample count must be non-negative")
        cfg = self.config
        k = np.arange(self.index, self.index + count, dtype=np.int64)
        self.index += count

        t = k * cfg.sampling_period
        theta = self._omega * t[:, None] + self._angles[None, :]
        voltage = self._v_peak * np.sin(theta)
        current = self._i_peak[None, :] * np.sin(theta + self._i_phase[None, :])

        if cfg.noise_stddev > 0:
            noise = self._rng.standard_normal((count, PHASE_COUNT, 2)) * cfg.noise_stddev
            voltage = voltage + noise[:, :, 0] * self._v_peak
            current = current + noise[:, :, 1] * self._i_peak[None, :]

        t_us = np.repeat(k * cfg.sampling_period_us, PHASE_COUNT)
        return SampleBlock(
            t_offset=t_us,
            voltage=np.rint(voltage * 1000.0).astype(np.int64).reshape(-1),
            current=np.rint(current * 1000.0).astype(np.int64).reshape(-1),
            meter_id=np.tile(self._ids, count),
        )

    def next_channel_block(self, count: int, phase: int) -> SampleBlock:
        """Next `count` instants of a single phase channel"""
        block = self.next_block(count)
        return block[phase::PHASE_COUNT]


def samples_for_duration(config: WaveformConfig, duration: float) -> int:
    """Number of sampling instants in `duration` seconds"""
    if duration < 0:
        raise WaveformError("duration must be non-negative")
    duration_us = int(round(duration * 1e6))
    return duration_us // config.sampling_period_us


def generate(config: WaveformConfig, duration: float) -> List[Sample]:
    """Synthesize `duration` seconds for all three phases, interleaved per instant"""
    if duration <= 0:
        raise WaveformError(f"duration must be positive, got {duration}")
    if duration <= config.sampling_period:
        raise WaveformError(
            f"duration {duration} s must exceed the sampling period {config.sampling_period} s"
        )
    count = samples_for_duration(config, duration)
    logger.debug("Generating %d instants x %d phases", count, PHASE_COUNT)
    return WaveformStream(config).next_block(count).to_samples()


def channel(samples: Sequence[Sample], phase: int) -> List[Sample]:
    """Samples of one phase, in stream order"""
    if not 0 <= phase < PHASE_COUNT:
        raise WaveformError(f"phase must be 0..{PHASE_COUNT - 1}, got {phase}")
    return [s for s in samples if s.phase == phase]


SampleSeq = Union[Sequence[Sample], SampleBlock]


def decimate(samples: SampleSeq, level: Union[ResolutionLevel, int]) -> SampleSeq:
    """Keep every d-th sample starting at index 0"""
    if not isinstance(level, ResolutionLevel):
        level = ResolutionLevel(int(level))
    d = level.decimation_factor
    if isinstance(samples, SampleBlock):
        return samples[::d]
    return list(samples[::d])


def power_mw(sample_v: Sample, sample_i: Sample) -> float:
    """Instantaneous power in milliwatts for a voltage/current pair"""
    return sample_v.voltage * sample_i.current / 1000.0


def mean_power(samples: Sequence[Sample]) -> float:
    """Average real power in watts over whole samples of all phases"""
    if not samples:
        return 0.0
    block = SampleBlock.from_samples(samples)
    instants = len(set(block.t_offset.tolist()))
    return float(np.sum(block.voltage * block.current)) / 1e6 / instants


def export_waveform_csv(samples: Sequence[Sample], path: Union[str, Path]) -> Path:
    """Write samples as t_offset_us, phase, voltage_mv, current_ma"""
    path = Path(path)
    frame = pd.DataFrame(
        [(s.t_offset, s.phase, s.voltage, s.current) for s in samples],
        columns=CSV_COLUMNS,
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write waveform CSV {path}: {e.strerror or e}") from e
    logger.info("Wrote %d samples to %s", len(samples), path)
    return path


def load_waveform_csv(path: Union[str, Path], meter_number: int = 1) -> List[Sample]:
    """Read a CSV produced by export_waveform_csv"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype="int64")
    except OSError as e:
        raise OSError(f"cannot read waveform CSV {path}: {e.strerror or e}") from e
    missing = set(CSV_COLUMNS) - set(frame.columns)
    if missing:
        raise WaveformError(f"{path}: missing columns {sorted(missing)}")
    return [Sample(int(r.t_offset_us), int(r.voltage_mv), int(r.current_ma),
                   make_meter_id(meter_number, int(r.phase)))
            for r in frame.itertuples(index=False)]
