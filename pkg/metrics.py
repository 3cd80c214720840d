#!/usr/bin/env python3
"""
Metrics for the Smart Meter Network Simulator

Per-packet delay records, per-flow and per-link counters, least-squares
delay-slope estimation, nearest-rank summaries and CSV/summary/manifest export.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

NS_PER_SECOND = 1_000_000_000
DELAY_COLUMNS = ["flow_id", "seq", "send_us", "recv_us", "delay_us", "size_bytes", "decimation"]
MANIFEST_NAME = "MANIFEST"


class InsufficientDataError(ValueError):
    """Raised when a fit needs more points than were delivered"""


@dataclass(frozen=True)
class DelayRecord:
    """One application packet delivered in order at the receiver"""
    flow_id: str
    seq: int
    send_ns: int
    recv_ns: int
    size_bytes: int
    decimation: int = 1

    @property
    def delay_ns(self) -> int:
        return self.recv_ns - self.send_ns

    @property
    def send_time(self) -> float:
        return self.send_ns / NS_PER_SECOND

    @property
    def recv_time(self) -> float:
        return self.recv_ns / NS_PER_SECOND

    @property
    def delay(self) -> float:
        return self.delay_ns / NS_PER_SECOND


@dataclass(frozen=True)
class SlopeEstimate:
    slope: float
    intercept: float
    r_squared: float


@dataclass(frozen=True)
class Summary:
    """Delay and loss statistics of one flow"""
    mean_delay: float = 0.0
    p50: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    loss_fraction: float = 0.0
    delivered_count: int = 0
    sent_count: int = 0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "mean_delay": self.mean_delay,
            "p50": self.p50,
            "p95": self.p95,
            "p99": self.p99,
            "loss_fraction": self.loss_fraction,
            "delivered_count": self.delivered_count,
            "sent_count": self.sent_count,
        }


@dataclass
class FlowStats:
    """Transport-level byte accounting of one flow"""
    flow_id: str
    bytes_submitted: int = 0
    bytes_acked: int = 0
    bytes_delivered: int = 0  # handed to the receiving application in order
    bytes_buffered: int = 0
    bytes_in_flight: int = 0
    bytes_lost_pending: int = 0
    packets_submitted: int = 0
    packets_delivered: int = 0
    frames_sent: int = 0
    retransmissions: int = 0
    timeouts: int = 0
    loss_events: int = 0
    stalled: bool = False

    def conservation_holds(self) -> bool:
        """Every submitted byte is acknowledged, queued, in flight or awaiting retransmission"""
        return self.bytes_submitted == (self.bytes_acked + self.bytes_buffered
                                        + self.bytes_in_flight + self.bytes_lost_pending)

    @property
    def packets_lost(self) -> int:
        return self.packets_submitted - self.packets_delivered


@dataclass
class LinkStats:
    """Served and dropped traffic of one directed link"""
    name: str
    bandwidth: float
    frames_enqueued: int = 0
    frames_dropped: int = 0
    bytes_served: int = 0
    max_queue_bytes: int = 0
    busy_ns: int = 0

    def utilization(self, elapsed_ns: int) -> float:
        if elapsed_ns <= 0:
            return 0.0
        return self.bytes_served * 8 / (elapsed_ns / NS_PER_SECOND) / self.bandwidth


@dataclass
class MetricsLog:
    """Everything a run measured, keyed by flow or link name"""
    records: Dict[str, List[DelayRecord]] = field(default_factory=dict)
    flows: Dict[str, FlowStats] = field(default_factory=dict)
    links: Dict[str, LinkStats] = field(default_factory=dict)
    cross_frames_sent: Dict[str, int] = field(default_factory=dict)
    cross_frames_delivered: Dict[str, int] = field(default_factory=dict)
    elapsed_ns: int = 0

    def add_record(self, record: DelayRecord) -> None:
        self.records.setdefault(record.flow_id, []).append(record)

    def flow_records(self, flow_id: str) -> List[DelayRecord]:
        return sorted(self.records.get(flow_id, []), key=lambda r: r.seq)

    def all_records(self) -> List[DelayRecord]:
        return [r for flow_id in sorted(self.records) for r in self.flow_records(flow_id)]

    def summarize_flow(self, flow_id: str) -> Summary:
        stats = self.flows.get(flow_id)
        losses = stats.packets_lost if stats else 0
        return summarize(self.flow_records(flow_id), losses)

    def total_link_bytes(self) -> int:
        return sum(link.bytes_served for link in self.links.values())


def _ols(xs: np.ndarray, ys: np.ndarray) -> SlopeEstimate:
    if xs.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 points, got {xs.shape[0]}")
    x_bar = xs.mean()
    y_bar = ys.mean()
    dx = xs - x_bar
    dy = ys - y_bar
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise InsufficientDataError("all points share one abscissa")
    sxy = float(np.dot(dx, dy))
    syy = float(np.dot(dy, dy))
    slope = sxy / sxx
    intercept = float(y_bar) - slope * float(x_bar)
    if syy == 0.0:
        r_squared = 1.0
    else:
        r_squared = min(1.0, max(0.0, sxy * sxy / (sxx * syy)))
    return SlopeEstimate(slope, intercept, r_squared)


def fit_slope(records: Sequence[DelayRecord]) -> SlopeEstimate:
    """Delay (s) against packet sequence number"""
    records = sorted(records, key=lambda r: r.seq)
    xs = np.array([r.seq for r in records], dtype=float)
    ys = np.array([r.delay for r in records], dtype=float)
    return _ols(xs, ys)


def fit_slope_time(records: Sequence[DelayRecord]) -> SlopeEstimate:
    """Delay (s) against send time (s); dimensionless slope"""
    records = sorted(records, key=lambda r: r.seq)
    xs = np.array([r.send_time for r in records], dtype=float)
    ys = np.array([r.delay for r in records], dtype=float)
    return _ols(xs, ys)


def percentile(values: Sequence[float], percent: float) -> float:
    """Nearest-rank percentile: smallest value with at least `percent` of the data at or below it"""
    if len(values) == 0:
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=float), percent, method="inverted_cdf"))



def summarize(records: Sequence[DelayRecord], losses: int = 0) -> Summary:
    """Mean, nearest-rank percentiles and loss fraction"""
    delivered = len(records)
    sent = delivered + losses
    loss_fraction = losses / sent if sent else 0.0
    if not delivered:
        return Summary(loss_fraction=loss_fraction, sent_count=sent)
    delays = sorted(r.delay for r in records)
    return Summary(
        mean_delay=sum(r.delay_ns for r in records) / delivered / NS_PER_SECOND,
        p50=percentile(delays, 50),
        p95=percentile(delays, 95),
        p99=percentile(delays, 99),
        loss_fraction=loss_fraction,
        delivered_count=delivered,
        sent_count=sent,
    )


def format_us(ns: int) -> str:
    """Nanoseconds as microseconds with three exact decimals"""
    sign = "-" if ns < 0 else ""
    ns = abs(ns)
    return f"{sign}{ns // 1000}.{ns % 1000:03d}"


def parse_us(text: str) -> int:
    """Inverse of format_us"""
    text = str(text).strip()
    sign = -1 if text.startswith("-") else 1
    whole, _, frac = text.lstrip("+-").partition(".")
    frac = (frac + "000")[:3]
    return sign * (int(whole or 0) * 1000 + int(frac))


def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def export_csv(records: Iterable[DelayRecord], path: Union[str, Path]) -> Path:
    """Write delay records, ordered by flow then seq"""
    path = Path(path)
    ordered = sorted(records, key=lambda r: (r.flow_id, r.seq))
    rows = [(r.flow_id, r.seq, format_us(r.send_ns), format_us(r.recv_ns),
             format_us(r.delay_ns), r.size_bytes, r.decimation) for r in ordered]
    _write_frame(pd.DataFrame(rows, columns=DELAY_COLUMNS), path)
    logger.debug("Wrote %d delay records to %s", len(rows), path)
    return path


def import_csv(path: Union[str, Path]) -> List[DelayRecord]:
    """Read records written by export_csv"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e
    missing = set(DELAY_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    return [DelayRecord(flow_id=row.flow_id, seq=int(row.seq), send_ns=parse_us(row.send_us),
                        recv_ns=parse_us(row.recv_us), size_bytes=int(row.size_bytes),
                        decimation=int(row.decimation))
            for row in frame.itertuples(index=False)]


def export_table(rows: Sequence[Sequence[Any]], columns: Sequence[str], path: Union[str, Path]) -> Path:
    """Generic CSV writer for verdict, control and trace logs"""
    return _write_frame(pd.DataFrame(list(rows), columns=list(columns)), Path(path))


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def export_summary(sections: Dict[str, Dict[str, Any]], path: Union[str, Path]) -> Path:
    """key = value lines, keys prefixed by section name"""
    path = Path(path)
    lines = []
    for section in sorted(sections):
        for key, value in sections[section].items():
            lines.append(f"{section}.{key} = {_format_value(value)}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def read_summary(path: Union[str, Path]) -> Dict[str, str]:
    result: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if " = " in line:
            key, value = line.split(" = ", 1)
            result[key.strip()] = value.strip()
    return result


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory: Union[str, Path], artifacts: Sequence[Path]) -> Path:
    """List every artifact with size and digest; written after all of them"""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    entries: List[Tuple[str, int, str]] = []
    for artifact in sorted(artifacts, key=lambda p: p.name):
        entries.append((artifact.name, artifact.stat().st_size, sha256_file(artifact)))
    try:
        path.write_text("".join(f"{name}\t{size}\t{digest}\n" for name, size, digest in entries),
                        encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Tuple[int, str]]:
    entries: Dict[str, Tuple[int, str]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        name, size, digest = line.split("\t")
        entries[name] = (int(size), digest)
    return entries


def summary_with_slope(records: Sequence[DelayRecord], losses: int) -> Dict[str, Any]:
    """Summary fields plus both slope fits where enough data exists"""
    values = summarize(records, losses).as_dict()
    try:
        values["slope_time"] = fit_slope_time(records).slope
        values["slope_index"] = fit_slope(records).slope
    except InsufficientDataError:
        values["slope_time"] = 0.0
        values["slope_index"] = 0.0
    return values

