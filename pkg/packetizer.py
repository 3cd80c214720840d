#!/usr/bin/env python3
"""
Packetizer for the Smart Meter Network Simulator

Binary wire format of a meter packet (all fields big-endian):

    offset  size  field
    0       4     seq                 u32, packet sequence number
    4       2     meter_id            u16, meter_number << 2 | phase
    6       4     send_interval_us    u32, logging interval in microseconds
    10      2     sample_count        u16
    12      2     decimation          u16
    14      2     magic               u16, always 0x4D53 ("MS")
    16      14*n  samples

Each sample is t_offset u32 (us), voltage i32 (mV), current i32 (mA) and
meter_id u16. Packets larger than the link MTU are split into frames by
fragment() and rebuilt by reassemble().
"""

import logging
import math
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from waveform import ALLOWED_DECIMATIONS, ResolutionLevel, Sample, SampleBlock

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IHIHHH")
HEADER_SIZE = HEADER.size  # 16
SAMPLE_SIZE = 14
MAGIC = 0x4D53
MAX_SAMPLES = 0xFFFF
MIN_MTU = 64

SAMPLE_DTYPE = np.dtype([
    ("t_offset", ">u4"),
    ("voltage", ">i4"),
    ("current", ">i4"),
    ("meter_id", ">u2"),
])
assert SAMPLE_DTYPE.itemsize == SAMPLE_SIZE


class PacketError(ValueError):
    """Base class for packet encode/decode failures"""


class StructuralError(PacketError):
    """Byte string too short or truncated against its header"""


class PacketFormatError(PacketError):
    """Byte string is not a well-formed meter packet"""


class PacketOverflowError(PacketError):
    """Too many samples for the 16-bit sample count"""


@dataclass(frozen=True)
class SendSchedule:
    """How often a meter emits a packet and at what resolution"""
    logging_interval: float
    resolution: ResolutionLevel = ResolutionLevel(1)
    sampling_period: float = 125e-6

    def __post_init__(self):
        if not self.logging_interval > 0:
            raise PacketError(f"logging_interval must be positive, got {self.logging_interval}")
        if self.base_samples_per_packet < 1:
            raise PacketError("logging_interval shorter than one sampling period")
        if abs(self.logging_interval / self.sampling_period - self.base_samples_per_packet) > 1e-6:
            raise PacketError("logging_interval must be a whole number of sampling periods")
        if not self.is_aligned(self.resolution):
            raise PacketError(
                f"logging_interval {self.logging_interval}s is not a multiple of the "
                f"effective period at decimation {self.resolution.decimation_factor}")

    @property
    def base_samples_per_packet(self) -> int:
        return int(round(self.logging_interval / self.sampling_period))

    @property
    def samples_per_packet(self) -> int:
        return self.samples_at(self.resolution)

    @property
    def interval_us(self) -> int:
        return int(round(self.logging_interval * 1e6))

    def samples_at(self, level: ResolutionLevel) -> int:
        return self.base_samples_per_packet // level.decimation_factor

    def is_aligned(self, level: ResolutionLevel) -> bool:
        return self.base_samples_per_packet % level.decimation_factor == 0

    def max_aligned_decimation(self, limit: int = ALLOWED_DECIMATIONS[-1]) -> int:
        """Largest allowed decimation that keeps the interval a whole number of periods"""
        return max(d for d in ALLOWED_DECIMATIONS
                   if d <= limit and self.base_samples_per_packet % d == 0)

    def packet_size(self, level: Optional[ResolutionLevel] = None) -> int:
        """Encoded bytes of one packet"""
        return packet_size(self.samples_at(level or self.resolution))

    def payload_rate(self, level: Optional[ResolutionLevel] = None) -> float:
        """Encoded bits per second this schedule offers"""
        return self.packet_size(level) * 8 / self.logging_interval

    def with_resolution(self, level: ResolutionLevel) -> "SendSchedule":
        return SendSchedule(self.logging_interval, level, self.sampling_period)

    def with_interval(self, logging_interval: float) -> "SendSchedule":
        return SendSchedule(logging_interval, self.resolution, self.sampling_period)


@dataclass(frozen=True)
class PacketHeader:
    """Decoded fixed header"""
    seq: int
    meter_id: int
    send_interval_us: int
    sample_count: int
    decimation: int

    @property
    def encoded_size(self) -> int:
        return packet_size(self.sample_count)


@dataclass(frozen=True)
class Frame:
    """Network-layer piece of a packet"""
    packet_seq: int
    index: int
    total: int
    data: bytes

    def __len__(self) -> int:
        return len(self.data)


def packet_size(sample_count: int) -> int:
    return HEADER_SIZE + SAMPLE_SIZE * sample_count


def _payload_from_block(block: SampleBlock) -> bytes:
    n = len(block)
    if n and (block.t_offset.min() < 0 or block.t_offset.max() > 0xFFFFFFFF):
        raise PacketFormatError("t_offset does not fit 32 bits")
    if n and (block.voltage.min() < -(2 ** 31) or block.voltage.max() >= 2 ** 31
              or block.current.min() < -(2 ** 31) or block.current.max() >= 2 ** 31):
        raise PacketFormatError("sample value does not fit 32 bits")
    records = np.empty(n, dtype=SAMPLE_DTYPE)
    records["t_offset"] = block.t_offset
    records["voltage"] = block.voltage
    records["current"] = block.current
    records["meter_id"] = block.meter_id
    return records.tobytes()


def encode(samples: Union[Sequence[Sample], SampleBlock], seq: int, meter_id: int,
           schedule: SendSchedule) -> bytes:
    """Serialize one logging interval of samples"""
    block = samples if isinstance(samples, SampleBlock) else SampleBlock.from_samples(samples)
    if len(block) > MAX_SAMPLES:
        raise PacketOverflowError(f"{len(block)} samples exceed {MAX_SAMPLES}")
    if not 0 <= seq <= 0xFFFFFFFF:
        raise PacketFormatError(f"seq {seq} does not fit 32 bits")
    if not 0 <= meter_id <= 0xFFFF:
        raise PacketFormatError(f"meter_id {meter_id} does not fit 16 bits")
    header = HEADER.pack(seq, meter_id, schedule.interval_us, len(block),
                         schedule.resolution.decimation_factor, MAGIC)
    return header + _payload_from_block(block)


def decode_header(data: bytes) -> PacketHeader:
    """Parse and check the fixed header and payload length"""
    if len(data) < HEADER_SIZE:
        raise StructuralError(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    seq, meter_id, interval_us, count, decimation, magic = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PacketFormatError(f"bad magic 0x{magic:04X}")
    payload = len(data) - HEADER_SIZE
    if payload % SAMPLE_SIZE:
        raise PacketFormatError(f"payload of {payload} bytes is not a whole number of samples")
    if payload != count * SAMPLE_SIZE:
        raise StructuralError(f"header announces {count} samples, payload holds {payload // SAMPLE_SIZE}")
    if decimation not in ALLOWED_DECIMATIONS:
        raise PacketFormatError(f"invalid decimation {decimation}")
    return PacketHeader(seq, meter_id, interval_us, count, decimation)


def decode(data: bytes) -> Tuple[PacketHeader, List[Sample]]:
    """Inverse of encode()"""
    header = decode_header(data)
    records = np.frombuffer(data, dtype=SAMPLE_DTYPE, offset=HEADER_SIZE, count=header.sample_count)
    samples = [Sample(int(t), int(v), int(i), int(m)) for t, v, i, m in records.tolist()]
    return header, samples


def fragment(packet: bytes, mtu: int, packet_seq: int = 0) -> List[Frame]:
    """Split an encoded packet into frames of at most `mtu` bytes of data"""
    if mtu < MIN_MTU:
        raise PacketError(f"mtu {mtu} below minimum {MIN_MTU}")
    total = max(1, math.ceil(len(packet) / mtu))
    return [Frame(packet_seq, i, total, packet[i * mtu:(i + 1) * mtu]) for i in range(total)]


def reassemble(frames: Iterable[Frame]) -> bytes:
    """Rebuild a packet from all of its frames, in any order"""
    frames = sorted(frames, key=lambda f: f.index)
    if not frames:
        raise StructuralError("no frames to reassemble")
    total = frames[0].total
    seqs = {f.packet_seq for f in frames}
    if len(seqs) != 1:
        raise StructuralError(f"frames from several packets: {sorted(seqs)}")
    if [f.index for f in frames] != list(range(total)) or any(f.total != total for f in frames):
        raise StructuralError(f"incomplete or inconsistent frame set for packet {frames[0].packet_seq}")
    return b"".join(f.data for f in frames)

