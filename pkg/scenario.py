#!/usr/bin/env python3
"""
Scenario Files for the Smart Meter Network Simulator

A scenario is a YAML document describing one experiment: meter flows, cross
traffic, link parameters and run settings. Every value left out of the file
is filled from the layered defaults (see config_manager), and
render_scenario() writes all of them back explicitly, so that parsing a
rendered scenario yields the same Scenario again.

Example:

    name: fig1_highfreq
    duration: 30
    seed: 42
    links:
      s1-s2: {queue_capacity: 2000000}
    meters:
      - {id: meter1, src: h1, dst: h5, logging_interval: 0.01}
    cross_traffic:
      - {id: x1, src: h2, dst: h6, rate: 33000000, frame_size: 16000, start: 10}
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from adapt import ControllerPolicy, PolicyError
from config_manager import ConfigManager
from detect import DetectorError
from netsim import (ConfigurationError, CrossTrafficSpec, LinkParams, Topology, TrafficPattern,
                    TransportParams, build_default_topology)
from packetizer import PacketError, SendSchedule
from plugin_system import PluginManager
from waveform import PHASE_COUNT, ResolutionLevel, WaveformConfig, WaveformError

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("name", "duration", "seed", "drain", "output", "trace", "window_size",
                  "waveform", "link", "links", "transport", "meters", "cross_traffic")
METER_KEYS = ("id", "src", "dst", "logging_interval", "sampling_period", "decimation", "phase",
              "meter_number", "start", "adaptive", "detector", "detector_params", "policy")
CROSS_KEYS = ("id", "src", "dst", "rate", "frame_size", "pattern", "on_duration", "off_duration",
              "start", "stop", "start_jitter", "responsive")

WAVEFORM_KEYS = tuple(WaveformConfig.__dataclass_fields__)
LINK_KEYS = tuple(LinkParams.__dataclass_fields__)
TRANSPORT_KEYS = tuple(TransportParams.__dataclass_fields__)

FieldPath = Tuple[Union[str, int], ...]


class ScenarioError(ValueError):
    """Invalid scenario, located by field path and source line"""

    def __init__(self, message: str, field: str = "", line: Optional[int] = None, source: str = ""):
        self.message = message
        self.field = field
        self.line = line
        self.source = source
        location = source or "<scenario>"
        if line is not None:
            location += f":{line}"
        prefix = f"{location}: {field}: " if field else f"{location}: "
        super().__init__(prefix + message)


@dataclass
class MeterFlow:
    """One smart meter sending its waveform from src to dst"""
    flow_id: str
    src: str
    dst: str
    logging_interval: float
    sampling_period: float
    decimation: int
    phase: int
    meter_number: int
    start: float
    adaptive: bool
    detector: str
    detector_params: Dict[str, Any]
    policy: ControllerPolicy

    @property
    def schedule(self) -> SendSchedule:
        return SendSchedule(self.logging_interval, ResolutionLevel(self.decimation), self.sampling_period)


@dataclass
class Scenario:
    name: str
    duration: float
    seed: int
    drain: float
    output: str
    trace: bool
    window_size: int
    waveform: WaveformConfig
    link: LinkParams
    link_overrides: Dict[str, Dict[str, Any]]
    transport: TransportParams
    meters: List[MeterFlow] = field(default_factory=list)
    cross_traffic: List[CrossTrafficSpec] = field(default_factory=list)

    def topology(self) -> Topology:
        """Default two-switch topology with this scenario's link parameters"""
        topology = build_default_topology(self.link)
        for name, overrides in sorted(self.link_overrides.items()):
            topology.override_link(name, **overrides)
        return topology

    def label(self, meter: MeterFlow) -> str:
        return f"{self.name}/{meter.flow_id}"


# ---------------------------------------------------------------------------
# Line lookup
# ---------------------------------------------------------------------------

def _line_of(root: Optional[yaml.Node], path: FieldPath) -> Optional[int]:
    """1-based line of the deepest node along `path` that exists"""
    if root is None:
        return None
    node = root
    line = node.start_mark.line + 1
    for part in path:
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                if key.value == part:
                    line = key.start_mark.line + 1
                    node = value
                    break
            else:
                return line
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            return line
    return line


def _field_name(path: FieldPath) -> str:
    text = ""
    for part in path:
        text += f"[{part}]" if isinstance(part, int) else (f".{part}" if text else str(part))
    return text


class _Reader:
    """Typed access to the parsed document with located errors"""

    def __init__(self, root: Optional[yaml.Node], source: str):
        self.root = root
        self.source = source

    def error(self, path: FieldPath, message: str) -> ScenarioError:
        return ScenarioError(message, _field_name(path), _line_of(self.root, path), self.source)

    def mapping(self, value: Any, path: FieldPath, allowed: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        if value is None:
            return {}
        if not isinstance(value, dict):
            raise self.error(path, "expected a mapping")
        if allowed is not None:
            for key in value:
                if key not in allowed:
                    raise self.error(path + (key,), f"unknown key '{key}'")
        return value

    def number(self, value: Any, path: FieldPath, positive: bool = False, minimum: Optional[float] = None) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self.error(path, f"expected a number, got {value!r}")
        if positive and not value > 0:
            raise self.error(path, f"must be positive, got {value}")
        if minimum is not None and value < minimum:
            raise self.error(path, f"must be at least {minimum}, got {value}")
        return value

    def integer(self, value: Any, path: FieldPath, minimum: Optional[int] = None) -> int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise self.error(path, f"expected an integer, got {value!r}")
        if minimum is not None and value < minimum:
            raise self.error(path, f"must be at least {minimum}, got {value}")
        return value

    def boolean(self, value: Any, path: FieldPath) -> bool:
        if not isinstance(value, bool):
            raise self.error(path, f"expected true or false, got {value!r}")
        return value

    def text(self, value: Any, path: FieldPath) -> str:
        if not isinstance(value, str) or not value:
            raise self.error(path, f"expected a non-empty string, got {value!r}")
        return value

    def host(self, value: Any, path: FieldPath, hosts: Sequence[str]) -> str:
        name = self.text(value, path)
        if name not in hosts:
            raise self.error(path, f"unknown host '{name}'")
        return name


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _merged(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    result = copy.deepcopy(base)
    result.update(copy.deepcopy(overrides))
    return result


def _parse_meter(reader: _Reader, raw: Any, index: int, defaults: Dict[str, Any],
                 hosts: Sequence[str], plugins: PluginManager) -> MeterFlow:
    path: FieldPath = ("meters", index)
    data = reader.mapping(raw, path, METER_KEYS)
    if "src" not in data or "dst" not in data:
        raise reader.error(path, "meter flow needs src and dst")

    src = reader.host(data["src"], path + ("src",), hosts)
    dst = reader.host(data["dst"], path + ("dst",), hosts)
    if src == dst:
        raise reader.error(path + ("dst",), f"source and destination are both {src}")
    flow_id = reader.text(data.get("id", f"meter{index + 1}"), path + ("id",))
    interval = reader.number(data.get("logging_interval", 0.01), path + ("logging_interval",), positive=True)
    sampling = reader.number(data.get("sampling_period", defaults["waveform"]["sampling_period"]),
                             path + ("sampling_period",), positive=True)
    decimation = reader.integer(data.get("decimation", 1), path + ("decimation",), minimum=1)
    phase = reader.integer(data.get("phase", 0), path + ("phase",), minimum=0)
    if phase >= PHASE_COUNT:
        raise reader.error(path + ("phase",), f"phase must be below {PHASE_COUNT}")
    meter_number = reader.integer(data.get("meter_number", index + 1), path + ("meter_number",), minimum=0)
    start = reader.number(data.get("start", 0.0), path + ("start",), minimum=0)
    adaptive = reader.boolean(data.get("adaptive", False), path + ("adaptive",))

    try:
        SendSchedule(interval, ResolutionLevel(decimation), sampling)
    except (PacketError, WaveformError) as e:
        raise reader.error(path + ("logging_interval",), str(e)) from None

    detector = reader.text(data.get("detector", "koad"), path + ("detector",))
    if detector not in plugins.available():
        raise reader.error(path + ("detector",),
                           f"unknown detector '{detector}', available: {plugins.available()}")
    params = _merged(defaults["detectors"].get(detector, {}),
                     reader.mapping(data.get("detector_params"), path + ("detector_params",)))
    try:
        plugins.create(detector, params)
    except (DetectorError, TypeError) as e:
        raise reader.error(path + ("detector_params",), str(e)) from None

    policy_values = _merged(defaults["policy"], reader.mapping(data.get("policy"), path + ("policy",)))
    try:
        policy = ControllerPolicy.from_dict(policy_values)
    except (PolicyError, TypeError) as e:
        raise reader.error(path + ("policy",), str(e)) from None

    return MeterFlow(flow_id, src, dst, interval, sampling, decimation, phase, meter_number, start,
                     adaptive, detector, params, policy)


def _parse_cross(reader: _Reader, raw: Any, index: int, hosts: Sequence[str]) -> CrossTrafficSpec:
    path: FieldPath = ("cross_traffic", index)
    data = reader.mapping(raw, path, CROSS_KEYS)
    for key in ("src", "dst", "rate"):
        if key not in data:
            raise reader.error(path, f"cross traffic needs '{key}'")
    src = reader.host(data["src"], path + ("src",), hosts)
    dst = reader.host(data["dst"], path + ("dst",), hosts)
    pattern_name = data.get("pattern", TrafficPattern.CONSTANT.value)
    try:
        pattern = TrafficPattern(pattern_name)
    except ValueError:
        raise reader.error(path + ("pattern",),
                           f"pattern must be one of {[p.value for p in TrafficPattern]}") from None
    stop = data.get("stop")
    try:
        return CrossTrafficSpec(
            flow_id=reader.text(data.get("id", f"cross{index + 1}"), path + ("id",)),
            src=src,
            dst=dst,
            rate=reader.number(data["rate"], path + ("rate",), minimum=0),
            frame_size=reader.integer(data.get("frame_size", 1460), path + ("frame_size",), minimum=1),
            pattern=pattern,
            on_duration=reader.number(data.get("on_duration", 1.0), path + ("on_duration",)),
            off_duration=reader.number(data.get("off_duration", 1.0), path + ("off_duration",)),
            start=reader.number(data.get("start", 0.0), path + ("start",), minimum=0),
            stop=None if stop is None else reader.number(stop, path + ("stop",), minimum=0),
            start_jitter=reader.number(data.get("start_jitter", 0.0), path + ("start_jitter",), minimum=0),
            responsive=reader.boolean(data.get("responsive", False), path + ("responsive",)),
        )
    except ConfigurationError as e:
        raise reader.error(path, str(e)) from None


def parse_scenario_text(text: str, config: Optional[Dict[str, Any]] = None, source: str = "<scenario>",
                        plugins: Optional[PluginManager] = None) -> Scenario:
    """Parse and validate a scenario document"""
    try:
        root = yaml.compose(text)
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(f"malformed YAML: {getattr(e, 'problem', e)}",
                            line=mark.line + 1 if mark else None, source=source) from None

    reader = _Reader(root, source)
    data = reader.mapping(document, (), TOP_LEVEL_KEYS)
    defaults = config if config is not None else ConfigManager().load_all_configs()
    experiment = defaults["experiment"]
    plugins = plugins or PluginManager()

    duration = reader.number(data.get("duration", experiment["duration"]), ("duration",), positive=True)
    seed = reader.integer(data.get("seed", experiment["seed"]), ("seed",), minimum=0)
    drain = reader.number(data.get("drain", experiment.get("drain", 0.0)), ("drain",), minimum=0)
    trace = reader.boolean(data.get("trace", experiment.get("trace", True)), ("trace",))
    name = reader.text(data.get("name", Path(source).stem if source != "<scenario>" else "scenario"), ("name",))
    output = reader.text(data.get("output", str(Path(experiment.get("output", "results")) / name)), ("output",))
    window_size = reader.integer(data.get("window_size", defaults["detectors"]["window_size"]),
                                 ("window_size",), minimum=2)

    waveform_values = reader.mapping(data.get("waveform"), ("waveform",), WAVEFORM_KEYS)
    link_values = reader.mapping(data.get("link"), ("link",), LINK_KEYS)
    transport_values = reader.mapping(data.get("transport"), ("transport",), TRANSPORT_KEYS)
    try:
        waveform = WaveformConfig.from_dict(_merged(defaults["waveform"], waveform_values))
    except (WaveformError, TypeError) as e:
        raise reader.error(("waveform",), str(e)) from None
    try:
        link = LinkParams.from_dict(_merged(defaults["link"], link_values))
    except (ConfigurationError, TypeError) as e:
        raise reader.error(("link",), str(e)) from None
    try:
        transport = TransportParams.from_dict(_merged(defaults["transport"], transport_values))
    except (ConfigurationError, TypeError) as e:
        raise reader.error(("transport",), str(e)) from None

    base_topology = build_default_topology(link)
    link_overrides: Dict[str, Dict[str, Any]] = {}
    for link_name, overrides in reader.mapping(data.get("links"), ("links",)).items():
        path: FieldPath = ("links", link_name)
        values = reader.mapping(overrides, path, LINK_KEYS)
        try:
            base_topology.override_link(str(link_name), **values)
        except (ConfigurationError, TypeError) as e:
            raise reader.error(path, str(e)) from None
        link_overrides[str(link_name)] = dict(values)

    hosts = base_topology.hosts()
    raw_meters = data.get("meters")
    if not isinstance(raw_meters, list) or not raw_meters:
        raise reader.error(("meters",), "at least one meter flow is required")
    meters = [_parse_meter(reader, raw, i, defaults, hosts, plugins) for i, raw in enumerate(raw_meters)]

    raw_cross = data.get("cross_traffic") or []
    if not isinstance(raw_cross, list):
        raise reader.error(("cross_traffic",), "expected a list")
    cross = [_parse_cross(reader, raw, i, hosts) for i, raw in enumerate(raw_cross)]

    ids = [m.flow_id for m in meters] + [c.flow_id for c in cross]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise reader.error(("meters",), f"duplicate flow ids {duplicates}")

    scenario = Scenario(name=name, duration=duration, seed=seed, drain=drain, output=output, trace=trace,
                        window_size=window_size, waveform=waveform, link=link, link_overrides=link_overrides,
                        transport=transport, meters=meters, cross_traffic=cross)
    logger.debug("Parsed scenario %s: %d meters, %d cross flows", name, len(meters), len(cross))
    return scenario


def parse_scenario(path: Union[str, Path], config: Optional[Dict[str, Any]] = None,
                   plugins: Optional[PluginManager] = None) -> Scenario:
    """Read and validate a scenario file"""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read scenario {path}: {e.strerror or e}") from e
    return parse_scenario_text(text, config, source=str(path), plugins=plugins)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _waveform_dict(config: WaveformConfig) -> Dict[str, Any]:
    return {
        "line_voltage_rms": config.line_voltage_rms,
        "frequency": config.frequency,
        "sampling_period": config.sampling_period,
        "noise_stddev": config.noise_stddev,
        "seed": config.seed,
        "meter_number": config.meter_number,
        "load_profiles": [{"current_amplitude": p.current_amplitude, "phase_offset": p.phase_offset}
                          for p in config.load_profiles],
    }


def _cross_dict(spec: CrossTrafficSpec) -> Dict[str, Any]:
    return {
        "id": spec.flow_id, "src": spec.src, "dst": spec.dst, "rate": spec.rate,
        "frame_size": spec.frame_size, "pattern": spec.pattern.value,
        "on_duration": spec.on_duration, "off_duration": spec.off_duration,
        "start": spec.start, "stop": spec.stop, "start_jitter": spec.start_jitter,
        "responsive": spec.responsive,
    }


def scenario_to_dict(scenario: Scenario) -> Dict[str, Any]:
    """Every field spelled out, in file order"""
    return {
        "name": scenario.name,
        "duration": scenario.duration,
        "seed": scenario.seed,
        "drain": scenario.drain,
        "output": scenario.output,
        "trace": scenario.trace,
        "window_size": scenario.window_size,
        "waveform": _waveform_dict(scenario.waveform),
        "link": scenario.link.as_dict(),
        "links": copy.deepcopy(scenario.link_overrides),
        "transport": {name: getattr(scenario.transport, name)
                      for name in scenario.transport.__dataclass_fields__},
        "meters": [{
            "id": m.flow_id, "src": m.src, "dst": m.dst,
            "logging_interval": m.logging_interval, "sampling_period": m.sampling_period,
            "decimation": m.decimation, "phase": m.phase, "meter_number": m.meter_number,
            "start": m.start, "adaptive": m.adaptive, "detector": m.detector,
            "detector_params": copy.deepcopy(m.detector_params), "policy": m.policy.as_dict(),
        } for m in scenario.meters],
        "cross_traffic": [_cross_dict(c) for c in scenario.cross_traffic],
    }


def render_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(scenario), sort_keys=False, default_flow_style=False)
