#!/usr/bin/env python3
"""
Discrete-Event Network Simulator for the Smart Meter Network Simulator

Models the two-switch software-defined topology: hosts and switches joined
by directed tail-drop FIFO links, forwarding routes installed once before the
run by a controller step, unresponsive cross-traffic generators, and a
reliable message transport with CUBIC congestion control.

Simulated time is an integer nanosecond tick; events with equal time run in
insertion order.
"""

import heapq
import logging
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from cubic import CubicState, on_ack as cubic_on_ack, on_loss as cubic_on_loss
from metrics import DelayRecord, FlowStats, LinkStats, MetricsLog, export_table, format_us
from packetizer import Frame, fragment, reassemble

logger = logging.getLogger(__name__)

TICKS_PER_SECOND = 1_000_000_000
TRACE_COLUMNS = ["time_us", "event_kind", "flow_id", "seq", "node", "detail"]


def to_ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


class ConfigurationError(ValueError):
    """Raised for topologies or flows that cannot be simulated"""


class EventKind(Enum):
    PACKET_ARRIVAL = "PacketArrival"
    DEPARTURE = "Departure"
    ACK_ARRIVAL = "AckArrival"
    TIMER_FIRE = "TimerFire"
    APP_SEND = "AppSend"
    CROSS_TRAFFIC_SEND = "CrossTrafficSend"


@dataclass(order=True)
class Event:
    time: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap keyed by (time, insertion sequence)"""

    def __init__(self):
        self._heap: List[Event] = []
        self._counter = 0

    def push(self, time: int, kind: EventKind, payload: Any = None) -> Event:
        event = Event(time, self._counter, kind, payload)
        self._counter += 1
        heapq.heappush(self._heap, event)
        return event

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def peek_time(self) -> Optional[int]:
        return self._heap[0].time if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)


# ---------------------------------------------------------------------------
# Topology and links
# ---------------------------------------------------------------------------

class NodeKind(Enum):
    HOST = "host"
    SWITCH = "switch"


@dataclass(frozen=True)
class Node:
    name: str
    kind: NodeKind


@dataclass(frozen=True)
class LinkParams:
    """Physical parameters of one directed link"""
    bandwidth: float = 1e8  # bits per second
    propagation_delay: float = 50e-6  # seconds
    queue_capacity: int = 150_000  # bytes
    mtu: int = 65_535  # bytes of frame data
    per_frame_overhead: int = 58  # Ethernet + IP + TCP headers

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")
        if not self.propagation_delay >= 0:
            raise ConfigurationError("propagation_delay must be non-negative")
        if self.mtu < 64:
            raise ConfigurationError(f"mtu {self.mtu} below 64 bytes")
        if self.per_frame_overhead < 0:
            raise ConfigurationError("per_frame_overhead must be non-negative")
        if self.queue_capacity < self.mtu + self.per_frame_overhead:
            raise ConfigurationError(
                f"queue_capacity {self.queue_capacity} cannot hold one {self.mtu}-byte frame")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LinkParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown link keys: {sorted(unknown)}")
        return cls(**data)

    def as_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def serialization_ticks(self, wire_bytes: int) -> int:
        bits = wire_bytes * 8 * TICKS_PER_SECOND
        if float(self.bandwidth).is_integer():
            return -(-bits // int(self.bandwidth))
        return math.ceil(bits / self.bandwidth)

    @property
    def propagation_ticks(self) -> int:
        return to_ticks(self.propagation_delay)


@dataclass
class LinkState:
    """Tail-drop byte queue in front of a serializing transmitter"""
    src: str
    dst: str
    params: LinkParams
    last_departure: int = 0
    queued_bytes: int = 0
    backlog: Deque[Tuple[int, int]] = field(default_factory=deque)
    stats: Optional[LinkStats] = None

    def __post_init__(self):
        if self.stats is None:
            self.stats = LinkStats(self.name, self.params.bandwidth)

    @property
    def name(self) -> str:
        return f"{self.src}-{self.dst}"

    def release(self, now: int) -> None:
        """Forget frames whose last bit has left the link by `now`"""
        while self.backlog and self.backlog[0][0] <= now:
            _, size = self.backlog.popleft()
            self.queued_bytes -= size


@dataclass(frozen=True)
class Enqueued:
    departure: int
    delivery: int


@dataclass(frozen=True)
class Dropped:
    queued_bytes: int


def link_enqueue(link: LinkState, wire_bytes: int, now: int) -> Union[Enqueued, Dropped]:
    """Admit a frame to the FIFO or drop it at the tail"""
    link.release(now)
    if link.queued_bytes + wire_bytes > link.params.queue_capacity:
        link.stats.frames_dropped += 1
        return Dropped(link.queued_bytes)

    start = max(now, link.last_departure)
    serialization = link.params.serialization_ticks(wire_bytes)
    departure = start + serialization
    link.last_departure = departure
    link.queued_bytes += wire_bytes
    link.backlog.append((departure, wire_bytes))

    link.stats.frames_enqueued += 1
    link.stats.busy_ns += serialization
    link.stats.max_queue_bytes = max(link.stats.max_queue_bytes, link.queued_bytes)
    return Enqueued(departure, departure + link.params.propagation_ticks)


@dataclass
class Topology:
    """Nodes, directed links and the controller-installed next-hop table"""
    nodes: Dict[str, Node] = field(default_factory=dict)
    links: Dict[Tuple[str, str], LinkParams] = field(default_factory=dict)
    routes: Dict[Tuple[str, str], str] = field(default_factory=dict)

    def add_node(self, name: str, kind: NodeKind) -> Node:
        if name in self.nodes:
            raise ConfigurationError(f"duplicate node {name}")
        node = Node(name, kind)
        self.nodes[name] = node
        return node

    def connect(self, a: str, b: str, params: LinkParams) -> None:
        """Add a link in both directions"""
        for name in (a, b):
            if name not in self.nodes:
                raise ConfigurationError(f"unknown node {name}")
        self.links[(a, b)] = params
        self.links[(b, a)] = params

    def hosts(self) -> List[str]:
        return sorted(n.name for n in self.nodes.values() if n.kind == NodeKind.HOST)

    def link_params(self, src: str, dst: str) -> LinkParams:
        try:
            return self.links[(src, dst)]
        except KeyError:
            raise ConfigurationError(f"no link {src}-{dst}") from None

    def override_link(self, name: str, **overrides: Any) -> None:
        """Replace parameters of the directed link named 'a-b'"""
        src, sep, dst = name.partition("-")
        if not sep or (src, dst) not in self.links:
            raise ConfigurationError(f"unknown link {name}")
        self.links[(src, dst)] = replace(self.links[(src, dst)], **overrides)

    def install_routes(self) -> None:
        """Controller step: shortest-path next hops toward every host"""
        self.routes.clear()
        for dst in self.hosts():
            # Breadth-first search outward from the destination over reversed links.
            parent: Dict[str, str] = {dst: dst}
            frontier = deque([dst])
            while frontier:
                current = frontier.popleft()
                for prev in sorted(a for (a, b) in self.links if b == current):
                    if prev not in parent:
                        parent[prev] = current
                        frontier.append(prev)
            for node, next_hop in parent.items():
                if node != dst:
                    self.routes[(node, dst)] = next_hop
        logger.debug("Installed %d forwarding entries", len(self.routes))

    def next_hop(self, at: str, dst: str) -> str:
        try:
            return self.routes[(at, dst)]
        except KeyError:
            raise ConfigurationError(f"no route from {at} to {dst}") from None

    def path(self, src: str, dst: str) -> List[str]:
        for name in (src, dst):
            if name not in self.nodes:
                raise ConfigurationError(f"unknown host {name}")
        hops = [src]
        while hops[-1] != dst:
            hops.append(self.next_hop(hops[-1], dst))
            if len(hops) > len(self.nodes):
                raise ConfigurationError(f"routing loop between {src} and {dst}")
        return hops

    def path_mtu(self, src: str, dst: str) -> int:
        hops = self.path(src, dst)
        return min(self.links[(a, b)].mtu for a, b in zip(hops, hops[1:]))

    def path_overhead(self, src: str, dst: str) -> int:
        hops = self.path(src, dst)
        return max(self.links[(a, b)].per_frame_overhead for a, b in zip(hops, hops[1:]))


def build_default_topology(link_params: Optional[LinkParams] = None) -> Topology:
    """h1..h4 on s1, h5..h8 on s2, s1-s2 trunk, every link alike"""
    params = link_params or LinkParams()
    topology = Topology()
    for switch in ("s1", "s2"):
        topology.add_node(switch, NodeKind.SWITCH)
    for i in range(1, 9):
        topology.add_node(f"h{i}", NodeKind.HOST)
        topology.connect(f"h{i}", "s1" if i <= 4 else "s2", params)
    topology.connect("s1", "s2", params)
    topology.install_routes()
    return topology


# ---------------------------------------------------------------------------
# Applications and traffic descriptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AppMessage:
    """One application packet handed to the transport"""
    data: bytes
    decimation: int = 1


class ApplicationSource(ABC):
    """Message producer driving one transport flow"""

    @abstractmethod
    def first_send(self) -> Optional[int]:
        """Tick of the first message, or None for a silent source"""

    @abstractmethod
    def emit(self, now: int) -> Optional[AppMessage]:
        """Message for the send opportunity at `now`"""

    @abstractmethod
    def next_send(self, now: int) -> Optional[int]:
        """Tick of the following send opportunity"""

    def on_delivery(self, record: DelayRecord, now: int) -> None:
        """Receiver feedback for one in-order delivered message"""

    def on_frame_lost(self, now: int) -> None:
        """Transport declared one of this flow's frames lost"""


class ScriptedSource(ApplicationSource):
    """Sends fixed byte strings at fixed times"""

    def __init__(self, messages: Sequence[Tuple[float, bytes]]):
        self.messages = sorted(((to_ticks(t), data) for t, data in messages), key=lambda m: m[0])
        self._cursor = 0

    def first_send(self) -> Optional[int]:
        return self.messages[0][0] if self.messages else None

    def emit(self, now: int) -> Optional[AppMessage]:
        _, data = self.messages[self._cursor]
        self._cursor += 1
        return AppMessage(data)

    def next_send(self, now: int) -> Optional[int]:
        if self._cursor < len(self.messages):
            return self.messages[self._cursor][0]
        return None


class ConstantBitRateSource(ApplicationSource):
    """Fixed-size messages at a fixed payload rate, for responsive cross flows"""

    def __init__(self, frame_size: int, rate: float, start: float = 0.0, stop: Optional[float] = None):
        if frame_size <= 0 or rate <= 0:
            raise ConfigurationError("constant bit rate source needs positive frame_size and rate")
        self.frame_size = frame_size
        self.rate = rate
        self.start = to_ticks(start)
        self.stop = to_ticks(stop) if stop is not None else None
        self._count = 0

    def _time_of(self, k: int) -> int:
        return self.start + (k * self.frame_size * 8 * TICKS_PER_SECOND) // int(round(self.rate))

    def first_send(self) -> Optional[int]:
        return self.start

    def emit(self, now: int) -> Optional[AppMessage]:
        self._count += 1
        return AppMessage(bytes(self.frame_size))

    def next_send(self, now: int) -> Optional[int]:
        t = self._time_of(self._count)
        if self.stop is not None and t >= self.stop:
            return None
        return t


@dataclass(frozen=True)
class TransportParams:
    mss: int = 1460
    initial_window_segments: int = 10
    cubic_c: float = 0.4
    cubic_beta: float = 0.7
    rto_initial: float = 1.0
    rto_min: float = 0.2  # floor under RTO = 2 x srtt; below the RTT it leaves the bare rule
    rto_max: float = 60.0
    dupack_threshold: int = 3

    def __post_init__(self):
        if self.mss <= 0 or self.initial_window_segments <= 0:
            raise ConfigurationError("mss and initial window must be positive")
        if not 0 < self.rto_min <= self.rto_max:
            raise ConfigurationError("need 0 < rto_min <= rto_max")
        if self.dupack_threshold < 1:
            raise ConfigurationError("dupack_threshold must be at least 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransportParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown transport keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FlowSpec:
    """A reliable transport flow between two hosts"""
    flow_id: str
    src: str
    dst: str
    source: ApplicationSource
    transport: TransportParams = field(default_factory=TransportParams)


class TrafficPattern(Enum):
    CONSTANT = "constant"
    ON_OFF = "on_off"


@dataclass(frozen=True)
class CrossTrafficSpec:
    """Background load between two hosts; rate counts payload bits"""
    flow_id: str
    src: str
    dst: str
    rate: float
    frame_size: int = 1460
    pattern: TrafficPattern = TrafficPattern.CONSTANT
    on_duration: float = 1.0
    off_duration: float = 1.0
    start: float = 0.0
    stop: Optional[float] = None
    start_jitter: float = 0.0
    responsive: bool = False

    def __post_init__(self):
        if not self.rate >= 0:
            raise ConfigurationError(f"{self.flow_id}: rate must be non-negative")
        if self.frame_size <= 0:
            raise ConfigurationError(f"{self.flow_id}: frame_size must be positive")
        if self.pattern == TrafficPattern.ON_OFF and not (self.on_duration > 0 and self.off_duration >= 0):
            raise ConfigurationError(f"{self.flow_id}: on/off durations must be positive")
        if self.start < 0 or self.start_jitter < 0:
            raise ConfigurationError(f"{self.flow_id}: start and start_jitter must be non-negative")
        if self.stop is not None and self.stop < self.start:
            raise ConfigurationError(f"{self.flow_id}: stop precedes start")


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

@dataclass
class NetPacket:
    """Anything that occupies a link"""
    kind: str  # "data", "ack" or "cross"
    flow_id: str
    src: str
    dst: str
    seq: int
    wire_bytes: int
    segment: Optional["Segment"] = None
    records: Tuple[DelayRecord, ...] = ()


@dataclass
class Segment:
    """One frame of an application message under transport control"""
    seq: int
    frame: Frame
    wire_bytes: int
    msg_send_ns: int
    msg_size: int
    decimation: int
    last_sent: int = -1
    send_order: int = -1
    transmissions: int = 0
    later_acked: int = 0
    lost: bool = False

    @property
    def data_bytes(self) -> int:
        return len(self.frame.data)


class TransportSender:
    """Sender half: window gate, loss detection, retransmission timer"""

    def __init__(self, flow: FlowSpec, mtu: int, overhead: int, stats: FlowStats):
        self.flow = flow
        self.params = flow.transport
        self.mtu = mtu
        self.overhead = overhead
        self.stats = stats
        self.cubic = CubicState.initial(self.params.mss, self.params.initial_window_segments,
                                        self.params.cubic_c, self.params.cubic_beta)
        self.unsent: Deque[Segment] = deque()
        self.outstanding: Dict[int, Segment] = {}
        self.retransmit: Deque[int] = deque()
        self.next_seq = 0
        self.next_msg = 0
        self.send_counter = 0
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.rto = self.params.rto_initial
        self.backoff = 1
        self.recovery_point = -1
        self.timer_at: Optional[int] = None

    def submit(self, message: AppMessage, now: int) -> List[Segment]:
        frames = fragment(message.data, self.mtu, self.next_msg)
        self.next_msg += 1
        segments = []
        for frame in frames:
            segment = Segment(self.next_seq, frame, len(frame.data) + self.overhead,
                              now, len(message.data), message.decimation)
            self.next_seq += 1
            self.unsent.append(segment)
            segments.append(segment)
        self.stats.packets_submitted += 1
        self.stats.bytes_submitted += len(message.data)
        self.stats.bytes_buffered += len(message.data)
        return segments

    def next_ready(self) -> Optional[Segment]:
        """Head of line: pending retransmissions before new data"""
        while self.retransmit:
            segment = self.outstanding.get(self.retransmit[0])
            if segment is not None and segment.lost:
                return segment
            self.retransmit.popleft()
        return self.unsent[0] if self.unsent else None

    def mark_sent(self, segment: Segment, now: int) -> None:
        if segment.transmissions == 0:
            self.unsent.popleft()
            self.outstanding[segment.seq] = segment
            self.stats.bytes_buffered -= segment.data_bytes
        else:
            self.retransmit.popleft()
            self.stats.bytes_lost_pending -= segment.data_bytes
            self.stats.retransmissions += 1
        segment.lost = False
        segment.later_acked = 0
        segment.transmissions += 1
        segment.last_sent = now
        segment.send_order = self.send_counter
        self.send_counter += 1
        self.cubic.in_flight += segment.wire_bytes
        self.stats.bytes_in_flight += segment.data_bytes
        self.stats.frames_sent += 1

    def mark_lost(self, segment: Segment, now: int, timeout: bool) -> None:
        segment.lost = True
        self.cubic.in_flight -= segment.wire_bytes
        self.stats.bytes_in_flight -= segment.data_bytes
        self.stats.bytes_lost_pending += segment.data_bytes
        self.retransmit.append(segment.seq)
        if timeout:
            self.stats.timeouts += 1
        if segment.last_sent > self.recovery_point:
            cubic_on_loss(self.cubic, to_seconds(now))
            self.recovery_point = now
            self.stats.loss_events += 1
        logger.debug("%s: frame %d lost (%s) at %.6fs, cwnd now %.0f", self.flow.flow_id,
                     segment.seq, "timeout" if timeout else "reordering", to_seconds(now), self.cubic.cwnd)
        self.flow.source.on_frame_lost(now)

    def on_ack(self, seq: int, now: int) -> None:
        segment = self.outstanding.pop(seq, None)
        if segment is None:
            return
        if segment.lost:
            self.stats.bytes_lost_pending -= segment.data_bytes
        else:
            self.cubic.in_flight -= segment.wire_bytes
            self.stats.bytes_in_flight -= segment.data_bytes
        self.stats.bytes_acked += segment.data_bytes

        if segment.transmissions == 1:
            self._update_rtt(to_seconds(now - segment.last_sent))
        self.backoff = 1
        cubic_on_ack(self.cubic, segment.wire_bytes, to_seconds(now))

        for other in self.outstanding.values():
            if not other.lost and other.send_order < segment.send_order:
                other.later_acked += 1
                if other.later_acked >= self.params.dupack_threshold:
                    self.mark_lost(other, now, timeout=False)

    def _update_rtt(self, sample: float) -> None:
        if self.srtt is None:
            self.srtt = sample
            self.rttvar = sample / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - sample)
            self.srtt = 0.875 * self.srtt + 0.125 * sample
        self.cubic.rtt_estimate = self.srtt
        self.rto = min(self.params.rto_max, max(self.params.rto_min, 2.0 * self.srtt))

    @property
    def effective_rto(self) -> float:
        return min(self.params.rto_max, self.rto * self.backoff)

    def timer_deadline(self) -> Optional[int]:
        in_flight = [s.last_sent for s in self.outstanding.values() if not s.lost]
        if not in_flight:
            return None
        return min(in_flight) + to_ticks(self.effective_rto)

    def expire(self, now: int) -> Optional[Segment]:
        """Declare the oldest in-flight frame lost if its timer ran out"""
        candidates = [s for s in self.outstanding.values() if not s.lost]
        if not candidates:
            return None
        oldest = min(candidates, key=lambda s: s.send_order)
        if oldest.last_sent + to_ticks(self.effective_rto) > now:
            return None
        self.mark_lost(oldest, now, timeout=True)
        self.backoff = min(self.backoff * 2, 1 << 16)
        return oldest

    @property
    def pending_data(self) -> bool:
        return bool(self.unsent or self.outstanding)


class TransportReceiver:
    """Receiver half: duplicate suppression, reassembly, in-order delivery"""

    def __init__(self, flow_id: str, stats: FlowStats):
        self.flow_id = flow_id
        self.stats = stats
        self.seen: set = set()
        self.partial: Dict[int, Dict[int, Frame]] = {}
        self.complete: Dict[int, Tuple[int, int, int]] = {}
        self.next_deliver = 0

    def on_segment(self, segment: Segment, now: int) -> List[DelayRecord]:
        if segment.seq in self.seen:
            return []
        self.seen.add(segment.seq)
        frame = segment.frame
        parts = self.partial.setdefault(frame.packet_seq, {})
        parts[frame.index] = frame
        if len(parts) == frame.total:
            data = reassemble(parts.values())
            del self.partial[frame.packet_seq]
            self.complete[frame.packet_seq] = (len(data), segment.msg_send_ns, segment.decimation)

        delivered = []
        while self.next_deliver in self.complete:
            size, send_ns, decimation = self.complete.pop(self.next_deliver)
            delivered.append(DelayRecord(self.flow_id, self.next_deliver, send_ns, now, size, decimation))
            self.stats.packets_delivered += 1
            self.stats.bytes_delivered += size
            self.next_deliver += 1
        return delivered


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass
class EventTrace:
    """Ordered record of processed events"""
    rows: List[Tuple[int, str, str, int, str, str]] = field(default_factory=list)
    enabled: bool = True

    def record(self, time: int, kind: str, flow_id: str, seq: int, node: str, detail: str = "") -> None:
        if self.enabled:
            self.rows.append((time, kind, flow_id, seq, node, detail))

    def __len__(self) -> int:
        return len(self.rows)

    def of_kind(self, kind: str) -> List[Tuple[int, str, str, int, str, str]]:
        return [row for row in self.rows if row[1] == kind]

    def to_csv(self, path: Union[str, Path]) -> Path:
        rows = [(format_us(t), kind, flow, seq, node, detail) for t, kind, flow, seq, node, detail in self.rows]
        return export_table(rows, TRACE_COLUMNS, path)


@dataclass
class SimulationResult:
    trace: EventTrace
    metrics: MetricsLog
    stalled_flows: List[str] = field(default_factory=list)


@dataclass
class _CrossGenerator:
    spec: CrossTrafficSpec
    start: int
    stop: int
    bits_per_frame: int
    rate: int
    period_start: int = 0
    index_in_period: int = 0
    sent: int = 0

    def emission_time(self) -> Optional[int]:
        """Next frame time, advancing through on/off periods"""
        while True:
            t = self.period_start + (self.index_in_period * self.bits_per_frame * TICKS_PER_SECOND) // self.rate
            if self.spec.pattern == TrafficPattern.ON_OFF:
                on_end = self.period_start + to_ticks(self.spec.on_duration)
                if t >= on_end:
                    self.period_start = on_end + to_ticks(self.spec.off_duration)
                    self.index_in_period = 0
                    continue
            return t if t < self.stop else None


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

class NetworkSimulator:
    """Single-owner simulation run over a fixed topology"""

    def __init__(self, topology: Topology, flows: Sequence[FlowSpec],
                 cross_traffic: Sequence[CrossTrafficSpec], duration: float, seed: int,
                 drain: float = 0.0, record_trace: bool = True):
        if not duration > 0:
            raise ConfigurationError(f"duration must be positive, got {duration}")
        if drain < 0:
            raise ConfigurationError("drain must be non-negative")
        self.topology = topology
        self.duration = to_ticks(duration)
        self.end = self.duration + to_ticks(drain)
        self.rng = np.random.default_rng(seed)
        self.queue = EventQueue()
        self.trace = EventTrace(enabled=record_trace)
        self.metrics = MetricsLog()
        self.links: Dict[Tuple[str, str], LinkState] = {
            key: LinkState(key[0], key[1], params) for key, params in sorted(topology.links.items())}
        for link in self.links.values():
            self.metrics.links[link.name] = link.stats

        self.senders: Dict[str, TransportSender] = {}
        self.receivers: Dict[str, TransportReceiver] = {}
        self.cross: Dict[str, _CrossGenerator] = {}

        ids = [f.flow_id for f in flows] + [c.flow_id for c in cross_traffic]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("flow ids must be unique")

        for flow in flows:
            self._add_flow(flow)
        for spec in cross_traffic:
            if spec.responsive:
                source = ConstantBitRateSource(spec.frame_size, spec.rate, spec.start,
                                               min(spec.stop, duration) if spec.stop is not None else duration) \
                    if spec.rate > 0 else ScriptedSource([])
                self._add_flow(FlowSpec(spec.flow_id, spec.src, spec.dst, source))
            else:
                self._add_cross(spec, duration)

    def _check_endpoints(self, flow_id: str, src: str, dst: str) -> None:
        for host in (src, dst):
            node = self.topology.nodes.get(host)
            if node is None or node.kind != NodeKind.HOST:
                raise ConfigurationError(f"{flow_id}: unknown host {host}")
        if src == dst:
            raise ConfigurationError(f"{flow_id}: source and destination are both {src}")
        self.topology.path(src, dst)
        self.topology.path(dst, src)

    def _add_flow(self, flow: FlowSpec) -> None:
        self._check_endpoints(flow.flow_id, flow.src, flow.dst)
        stats = FlowStats(flow.flow_id)
        self.metrics.flows[flow.flow_id] = stats
        mtu = self.topology.path_mtu(flow.src, flow.dst)
        overhead = self.topology.path_overhead(flow.src, flow.dst)
        self.senders[flow.flow_id] = TransportSender(flow, mtu, overhead, stats)
        self.receivers[flow.flow_id] = TransportReceiver(flow.flow_id, stats)
        first = flow.source.first_send()
        if first is not None and first < self.duration:
            self.queue.push(first, EventKind.APP_SEND, flow.flow_id)

    def _add_cross(self, spec: CrossTrafficSpec, duration: float) -> None:
        self._check_endpoints(spec.flow_id, spec.src, spec.dst)
        if spec.frame_size > self.topology.path_mtu(spec.src, spec.dst):
            raise ConfigurationError(f"{spec.flow_id}: frame_size exceeds the path MTU")
        jitter = to_ticks(self.rng.uniform(0.0, spec.start_jitter)) if spec.start_jitter > 0 else 0
        start = to_ticks(spec.start) + jitter
        stop = min(to_ticks(spec.stop), self.duration) if spec.stop is not None else self.duration
        self.metrics.cross_frames_sent[spec.flow_id] = 0
        self.metrics.cross_frames_delivered[spec.flow_id] = 0
        if spec.rate <= 0:
            return
        generator = _CrossGenerator(spec, start, stop, spec.frame_size * 8, max(1, int(round(spec.rate))),
                                    period_start=start)
        self.cross[spec.flow_id] = generator
        first = generator.emission_time()
        if first is not None:
            self.queue.push(first, EventKind.CROSS_TRAFFIC_SEND, spec.flow_id)

    # -- forwarding ---------------------------------------------------------

    def _forward(self, packet: NetPacket, at: str, now: int) -> None:
        next_hop = self.topology.next_hop(at, packet.dst)
        link = self.links[(at, next_hop)]
        result = link_enqueue(link, packet.wire_bytes, now)
        if isinstance(result, Dropped):
            self.trace.record(now, "Drop", packet.flow_id, packet.seq, at, link.name)
            logger.debug("Tail drop on %s: %s frame %d", link.name, packet.flow_id, packet.seq)
            return
        self.queue.push(result.departure, EventKind.DEPARTURE, (link, packet))

    def _on_departure(self, now: int, link: LinkState, packet: NetPacket) -> None:
        link.stats.bytes_served += packet.wire_bytes
        self.trace.record(now, EventKind.DEPARTURE.value, packet.flow_id, packet.seq, link.src, link.name)
        arrival = now + link.params.propagation_ticks
        if packet.kind == "ack" and link.dst == packet.dst:
            self.queue.push(arrival, EventKind.ACK_ARRIVAL, packet)
        else:
            self.queue.push(arrival, EventKind.PACKET_ARRIVAL, (link.dst, packet))

    def _on_arrival(self, now: int, node: str, packet: NetPacket) -> None:
        if node != packet.dst:
            self.trace.record(now, EventKind.PACKET_ARRIVAL.value, packet.flow_id, packet.seq, node, packet.kind)
            self._forward(packet, node, now)
            return

        if packet.kind == "cross":
            self.metrics.cross_frames_delivered[packet.flow_id] += 1
            self.trace.record(now, EventKind.PACKET_ARRIVAL.value, packet.flow_id, packet.seq, node, "cross")
            return

        receiver = self.receivers[packet.flow_id]
        delivered = receiver.on_segment(packet.segment, now)
        for record in delivered:
            self.metrics.add_record(record)
        self.trace.record(now, EventKind.PACKET_ARRIVAL.value, packet.flow_id, packet.seq, node,
                          f"delivered={len(delivered)}")
        sender = self.senders[packet.flow_id]
        ack = NetPacket("ack", packet.flow_id, packet.dst, packet.src, packet.seq,
                        sender.overhead, records=tuple(delivered))
        self._forward(ack, node, now)

    def _on_ack(self, now: int, packet: NetPacket) -> None:
        sender = self.senders[packet.flow_id]
        self.trace.record(now, EventKind.ACK_ARRIVAL.value, packet.flow_id, packet.seq, packet.dst)
        sender.on_ack(packet.seq, now)
        for record in packet.records:
            sender.flow.source.on_delivery(record, now)
        self._pump(sender, now)

    # -- transport ----------------------------------------------------------

    def _pump(self, sender: TransportSender, now: int) -> None:
        """Send whatever the window admits, then keep the timer armed"""
        while True:
            segment = sender.next_ready()
            if segment is None or not sender.cubic.can_send(segment.wire_bytes):
                break
            sender.mark_sent(segment, now)
            flow = sender.flow
            packet = NetPacket("data", flow.flow_id, flow.src, flow.dst, segment.seq,
                               segment.wire_bytes, segment=segment)
            self._forward(packet, flow.src, now)
        self._arm_timer(sender, now)

    def _arm_timer(self, sender: TransportSender, now: int) -> None:
        deadline = sender.timer_deadline()
        if deadline is None:
            return
        if sender.timer_at is None or deadline < sender.timer_at:
            sender.timer_at = deadline
            # A deadline already passed fires now; event time never runs backwards.
            self.queue.push(max(deadline, now), EventKind.TIMER_FIRE, (sender.flow.flow_id, deadline))

    def _on_timer(self, now: int, flow_id: str, deadline: int) -> None:
        sender = self.senders[flow_id]
        if sender.timer_at != deadline:
            return
        sender.timer_at = None
        expired = sender.expire(now)
        if expired is not None:
            self.trace.record(now, EventKind.TIMER_FIRE.value, flow_id, expired.seq, sender.flow.src, "rto")
        self._pump(sender, now)

    def _on_app_send(self, now: int, flow_id: str) -> None:
        sender = self.senders[flow_id]
        source = sender.flow.source
        message = source.emit(now)
        if message is not None:
            segments = sender.submit(message, now)
            self.trace.record(now, EventKind.APP_SEND.value, flow_id, sender.next_msg - 1, sender.flow.src,
                              f"bytes={len(message.data)} frames={len(segments)}")
            self._pump(sender, now)
        next_time = source.next_send(now)
        if next_time is not None and next_time < self.duration:
            if next_time < now:
                raise ConfigurationError(f"{flow_id}: source scheduled a send in the past")
            self.queue.push(next_time, EventKind.APP_SEND, flow_id)

    def _on_cross_send(self, now: int, flow_id: str) -> None:
        generator = self.cross[flow_id]
        spec = generator.spec
        overhead = self.topology.path_overhead(spec.src, spec.dst)
        packet = NetPacket("cross", flow_id, spec.src, spec.dst, generator.sent, spec.frame_size + overhead)
        self.trace.record(now, EventKind.CROSS_TRAFFIC_SEND.value, flow_id, generator.sent, spec.src,
                          f"bytes={spec.frame_size}")
        generator.sent += 1
        generator.index_in_period += 1
        self.metrics.cross_frames_sent[flow_id] += 1
        self._forward(packet, spec.src, now)
        next_time = generator.emission_time()
        if next_time is not None:
            self.queue.push(next_time, EventKind.CROSS_TRAFFIC_SEND, flow_id)

    # -- main loop ----------------------------------------------------------

    def run(self) -> SimulationResult:
        now = 0
        handled = 0
        while self.queue and self.queue.peek_time() <= self.end:
            event = self.queue.pop()
            now = event.time
            handled += 1
            if event.kind == EventKind.DEPARTURE:
                self._on_departure(now, *event.payload)
            elif event.kind == EventKind.PACKET_ARRIVAL:
                self._on_arrival(now, *event.payload)
            elif event.kind == EventKind.ACK_ARRIVAL:
                self._on_ack(now, event.payload)
            elif event.kind == EventKind.TIMER_FIRE:
                self._on_timer(now, *event.payload)
            elif event.kind == EventKind.APP_SEND:
                self._on_app_send(now, event.payload)
            elif event.kind == EventKind.CROSS_TRAFFIC_SEND:
                self._on_cross_send(now, event.payload)

        self.metrics.elapsed_ns = self.end
        stalled = []
        for flow_id, stats in sorted(self.metrics.flows.items()):
            stats.stalled = stats.bytes_delivered < stats.bytes_submitted
            if stats.stalled:
                stalled.append(flow_id)
                logger.warning("Flow %s stalled: %d of %d bytes delivered", flow_id,
                               stats.bytes_delivered, stats.bytes_submitted)
        logger.info("Simulated %.3fs: %d events, %d trace rows", to_seconds(self.end), handled, len(self.trace))
        return SimulationResult(self.trace, self.metrics, stalled)


def run(topology: Topology, flows: Sequence[FlowSpec], cross_traffic: Sequence[CrossTrafficSpec],
        duration: float, seed: int, drain: float = 0.0, record_trace: bool = True) -> SimulationResult:
    """Simulate until `duration` (plus `drain` for in-flight data)"""
    return NetworkSimulator(topology, flows, cross_traffic, duration, seed, drain, record_trace).run()

