#!/usr/bin/env python3
"""
Smart Meter Network Simulator - command line entry point

Subcommands:

    run           simulate one scenario and write its artifacts
    compare       run several scenarios and tabulate delay, slope and loss
    sweep         run one scenario over a grid of logging intervals and decimations
    gen-waveform  dump a synthetic three-phase waveform as CSV

Exit codes: 0 success, 1 invalid scenario or configuration, 2 I/O failure.
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from rich.text import Text
from tabulate import tabulate

from adapt import CONTROL_COLUMNS, AdaptiveController, PolicyError
from config_manager import ConfigError, ConfigManager
from detect import DetectorError
from meter_app import MeterSource
from metrics import export_csv, export_summary, export_table, format_us, summary_with_slope, write_manifest
from netsim import ConfigurationError, FlowSpec, NetworkSimulator, SimulationResult
from packetizer import PacketError
from plugin_system import PluginManager
from scenario import Scenario, ScenarioError, parse_scenario
from sim_logging import configure_logging, error_console, status
from waveform import WaveformConfig, WaveformError, export_waveform_csv, generate

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ["label", "packet_size", "interval", "mean_delay", "slope_time", "loss_fraction"]
CONFIG_ERRORS = (ScenarioError, ConfigurationError, DetectorError, PolicyError, ConfigError,
                 PacketError, WaveformError)


@dataclass
class FlowReport:
    """Per meter flow outcome of one run"""
    flow_id: str
    label: str
    packet_size: int
    interval: float
    decimation: int
    values: Dict[str, Any]


@dataclass
class RunResult:
    scenario: Scenario
    output_dir: Path
    artifacts: List[Path] = field(default_factory=list)
    flows: List[FlowReport] = field(default_factory=list)
    stalled: List[str] = field(default_factory=list)


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    packet_size: int
    interval: float
    mean_delay: float
    slope_time: float
    loss_fraction: float

    def as_tuple(self) -> Tuple[Any, ...]:
        return (self.label, self.packet_size, self.interval, self.mean_delay, self.slope_time,
                self.loss_fraction)


def build_simulation(scenario: Scenario, plugins: Optional[PluginManager] = None
                     ) -> Tuple[NetworkSimulator, Dict[str, MeterSource]]:
    """Wire meters, detectors and controllers into a simulator instance"""
    plugins = plugins or PluginManager()
    flows = []
    sources: Dict[str, MeterSource] = {}
    for meter in scenario.meters:
        waveform = replace(scenario.waveform, meter_number=meter.meter_number,
                           sampling_period=meter.sampling_period)
        schedule = meter.schedule
        controller = AdaptiveController(meter.policy, schedule) if meter.adaptive else None
        source = MeterSource(waveform, schedule, phase=meter.phase, start=meter.start,
                             stop=scenario.duration, window_size=scenario.window_size,
                             detector=plugins.create(meter.detector, meter.detector_params),
                             controller=controller)
        sources[meter.flow_id] = source
        flows.append(FlowSpec(meter.flow_id, meter.src, meter.dst, source, scenario.transport))
    simulator = NetworkSimulator(scenario.topology(), flows, scenario.cross_traffic, scenario.duration,
                                 scenario.seed, scenario.drain, scenario.trace)
    return simulator, sources


def simulate(scenario: Scenario, plugins: Optional[PluginManager] = None
             ) -> Tuple[SimulationResult, Dict[str, MeterSource]]:
    simulator, sources = build_simulation(scenario, plugins)
    return simulator.run(), sources


def _flow_section(result: SimulationResult, source: MeterSource, flow_id: str) -> Dict[str, Any]:
    stats = result.metrics.flows[flow_id]
    records = result.metrics.flow_records(flow_id)
    values = summary_with_slope(records, stats.packets_lost)
    first_red = source.detector.first_red_ns() if source.detector else None
    values.update({
        "packets_submitted": stats.packets_submitted,
        "bytes_submitted": stats.bytes_submitted,
        "bytes_delivered": stats.bytes_delivered,
        "frames_sent": stats.frames_sent,
        "retransmissions": stats.retransmissions,
        "timeouts": stats.timeouts,
        "loss_events": stats.loss_events,
        "conservation": stats.conservation_holds(),
        "stalled": stats.stalled,
        "windows": len(source.features),
        "first_red_us": format_us(first_red) if first_red is not None else "none",
        "level_changes": source.controller.level_changes() if source.controller else 0,
        "final_decimation": source.schedule.resolution.decimation_factor,
    })
    return values


def run_scenario(scenario: Scenario, output_dir: Optional[Path] = None,
                 plugins: Optional[PluginManager] = None) -> RunResult:
    """Simulate and write delays, verdicts, control log, trace, summary and MANIFEST"""
    out = Path(output_dir) if output_dir is not None else Path(scenario.output)
    out.mkdir(parents=True, exist_ok=True)
    result, sources = simulate(scenario, plugins)
    run = RunResult(scenario, out, stalled=list(result.stalled_flows))

    sections: Dict[str, Dict[str, Any]] = {"scenario": {
        "name": scenario.name,
        "duration": scenario.duration,
        "seed": scenario.seed,
        "drain": scenario.drain,
        "meters": len(scenario.meters),
        "cross_flows": len(scenario.cross_traffic),
    }}
    for meter in scenario.meters:
        source = sources[meter.flow_id]
        run.artifacts.append(export_csv(result.metrics.flow_records(meter.flow_id),
                                        out / f"delays_{meter.flow_id}.csv"))
        run.artifacts.append(source.detector.export_verdicts(out / f"verdicts_{meter.flow_id}.csv"))
        if source.controller is not None:
            run.artifacts.append(source.controller.export_decisions(out / f"control_{meter.flow_id}.csv"))
        else:
            run.artifacts.append(export_table([], CONTROL_COLUMNS, out / f"control_{meter.flow_id}.csv"))

        values = _flow_section(result, source, meter.flow_id)
        sections[f"flow.{meter.flow_id}"] = values
        run.flows.append(FlowReport(meter.flow_id, scenario.label(meter), meter.schedule.packet_size(),
                                    meter.logging_interval, meter.decimation, values))

    for name, link in sorted(result.metrics.links.items()):
        if link.frames_enqueued:
            sections[f"link.{name}"] = {
                "frames_enqueued": link.frames_enqueued,
                "frames_dropped": link.frames_dropped,
                "max_queue_bytes": link.max_queue_bytes,
                "utilization": link.utilization(result.metrics.elapsed_ns),
            }
    for flow_id in sorted(result.metrics.cross_frames_sent):
        sections[f"cross.{flow_id}"] = {
            "frames_sent": result.metrics.cross_frames_sent[flow_id],
            "frames_delivered": result.metrics.cross_frames_delivered[flow_id],
        }

    if scenario.trace:
        run.artifacts.append(result.trace.to_csv(out / "trace.csv"))
    run.artifacts.append(export_summary(sections, out / "summary.txt"))
    write_manifest(out, run.artifacts)
    logger.info("Scenario %s: %d artifacts in %s", scenario.name, len(run.artifacts) + 1, out)
    return run


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def comparison_rows(run: RunResult) -> List[ComparisonRow]:
    return [ComparisonRow(flow.label, flow.packet_size, flow.interval, flow.values["mean_delay"],
                          flow.values["slope_time"], flow.values["loss_fraction"]) for flow in run.flows]


def _compare_member(path: str, defaults_dir: Optional[str], custom_dir: Optional[str],
                    seed: Optional[int], output_dir: str) -> List[ComparisonRow]:
    """Run one compare member in isolation, suitable for a worker process"""
    config = ConfigManager(defaults_dir, custom_dir).load_all_configs()
    scenario = parse_scenario(path, config)
    if seed is not None:
        scenario = replace(scenario, seed=seed)
    return comparison_rows(run_scenario(scenario, Path(output_dir)))


def check_comparable(scenarios: Sequence[Scenario]) -> None:
    if len(scenarios) < 2:
        raise ScenarioError("compare needs at least two scenarios")
    durations = {s.duration for s in scenarios}
    if len(durations) > 1:
        raise ScenarioError(f"scenarios differ in duration: {sorted(durations)}", field="duration")


def compare(paths: Sequence[str], output_dir: Path, defaults_dir: Optional[str] = None,
            custom_dir: Optional[str] = None, seed: Optional[int] = None, jobs: int = 1) -> List[ComparisonRow]:
    """Run every scenario, then write comparison.csv with one row per meter flow"""
    config = ConfigManager(defaults_dir, custom_dir).load_all_configs()
    scenarios = [parse_scenario(p, config) for p in paths]
    check_comparable(scenarios)

    output_dir.mkdir(parents=True, exist_ok=True)
    members = [(str(p), defaults_dir, custom_dir, seed, str(output_dir / f"{i:02d}_{s.name}"))
               for i, (p, s) in enumerate(zip(paths, scenarios))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_compare_member, *zip(*members)))
    else:
        batches = [_compare_member(*member) for member in members]

    rows = [row for batch in batches for row in batch]
    export_table([row.as_tuple() for row in rows], COMPARISON_COLUMNS, output_dir / "comparison.csv")
    return rows


def render_comparison(rows: Sequence[ComparisonRow]) -> str:
    table = [(r.label, r.packet_size, f"{r.interval:g}", f"{r.mean_delay * 1e3:.3f}",
              f"{r.slope_time:.3e}", f"{r.loss_fraction:.4f}") for r in rows]
    return tabulate(table, headers=["scenario", "packet [B]", "interval [s]", "mean delay [ms]",
                                    "slope [s/s]", "loss"], tablefmt="github")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def sweep_scenarios(base: Scenario, intervals: Sequence[float], decimations: Sequence[int]) -> List[Scenario]:
    """One scenario per (logging interval, decimation) pair, applied to every meter of `base`"""
    if not intervals or not decimations:
        raise ScenarioError("sweep needs at least one interval and one decimation")
    if not base.meters:
        raise ScenarioError("sweep needs a scenario with meters", field="meters")
    scenarios = []
    for interval in sorted(set(intervals)):
        for d in sorted(set(decimations)):
            meters = [replace(m, logging_interval=interval, decimation=d) for m in base.meters]
            sizes = sorted({m.schedule.packet_size() for m in meters})
            logger.debug("Grid point %g s / d=%d: packet sizes %s", interval, d, sizes)
            scenarios.append(replace(base, name=f"{base.name}_i{interval:g}_d{d}", meters=meters))
    return scenarios


def _sweep_member(scenario: Scenario, output_dir: str) -> List[ComparisonRow]:
    return comparison_rows(run_scenario(scenario, Path(output_dir)))


def sweep(path: str, intervals: Sequence[float], decimations: Sequence[int], output_dir: Path,
          defaults_dir: Optional[str] = None, custom_dir: Optional[str] = None, seed: Optional[int] = None,
          jobs: int = 1) -> List[ComparisonRow]:
    """Run a base scenario over an interval x decimation grid and write comparison.csv"""
    config = ConfigManager(defaults_dir, custom_dir).load_all_configs()
    base = parse_scenario(path, config)
    if seed is not None:
        base = replace(base, seed=seed)
    scenarios = sweep_scenarios(base, intervals, decimations)
    logger.info("Sweeping %s over %d grid points", base.name, len(scenarios))

    output_dir.mkdir(parents=True, exist_ok=True)
    dirs = [str(output_dir / f"{i:02d}_{s.name}") for i, s in enumerate(scenarios)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(_sweep_member, scenarios, dirs))
    else:
        batches = [_sweep_member(s, d) for s, d in zip(scenarios, dirs)]

    rows = [row for batch in batches for row in batch]
    export_table([row.as_tuple() for row in rows], COMPARISON_COLUMNS, output_dir / "comparison.csv")
    return rows


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_scenario(args: argparse.Namespace) -> Scenario:
    config = ConfigManager(args.defaults_dir, args.custom_dir).load_all_configs()
    scenario = parse_scenario(args.scenario, config)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _load_scenario(args)
    run = run_scenario(scenario, Path(args.out) if args.out else None)
    status(f"{scenario.name}: {len(run.artifacts) + 1} files written to {run.output_dir}",
           args.quiet)
    if not args.quiet:
        rows = [(f.flow_id, f.packet_size, f.interval, f"{f.values['mean_delay'] * 1e3:.3f}",
                 f"{f.values['p99'] * 1e3:.3f}", f"{f.values['slope_time']:.3e}",
                 f"{f.values['loss_fraction']:.4f}", f.values["final_decimation"]) for f in run.flows]
        status(tabulate(rows, headers=["flow", "packet [B]", "interval [s]", "mean [ms]", "p99 [ms]",
                                       "slope [s/s]", "loss", "decimation"], tablefmt="github"))
    for flow_id in run.stalled:
        logger.warning("Flow %s did not deliver all data before the run ended", flow_id)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path("results") / "compare"
    rows = compare(args.scenario, out, args.defaults_dir, args.custom_dir, args.seed, args.jobs)
    if not args.quiet:
        status(render_comparison(rows))
    status(f"Comparison written to {out / 'comparison.csv'}", args.quiet)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else Path("results") / "sweep"
    rows = sweep(args.scenario, args.interval, args.decimation, out, args.defaults_dir, args.custom_dir,
                 args.seed, args.jobs)
    if not args.quiet:
        status(render_comparison(rows))
    status(f"Sweep of {len(rows)} flows written to {out / 'comparison.csv'}", args.quiet)
    return 0


def cmd_gen_waveform(args: argparse.Namespace) -> int:
    if args.scenario:
        waveform = _load_scenario(args).waveform
    else:
        config = ConfigManager(args.defaults_dir, args.custom_dir).load_all_configs()
        waveform = WaveformConfig.from_dict(config["waveform"])
    if args.seed is not None:
        waveform = replace(waveform, seed=args.seed)
    waveform = replace(waveform, meter_number=args.meter_number)
    samples = generate(waveform, args.duration)
    path = export_waveform_csv(samples, Path(args.out) if args.out else Path("waveform.csv"))
    status(f"{len(samples)} samples written to {path}", args.quiet)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Override the scenario seed")
    common.add_argument("--out", help="Output directory (file for gen-waveform)")
    common.add_argument("--quiet", "-q", action="store_true", help="Only report errors")
    common.add_argument("--verbose", "-v", action="count", default=0, help="Debug logging")
    common.add_argument("--defaults-dir", help="Directory with the base defaults")
    common.add_argument("--custom-dir", help="Directory with override files merged on top")

    parser = argparse.ArgumentParser(description="Smart meter network delay simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", parents=[common], help="Simulate one scenario")
    run.add_argument("--scenario", required=True, help="Scenario YAML file")
    run.set_defaults(handler=cmd_run)

    cmp = commands.add_parser("compare", parents=[common], help="Compare several scenarios")
    cmp.add_argument("--scenario", required=True, nargs="+", help="Two or more scenario files")
    cmp.add_argument("--jobs", "-j", type=int, default=1, help="Scenarios simulated in parallel")
    cmp.set_defaults(handler=cmd_compare)

    swp = commands.add_parser("sweep", parents=[common], help="Run one scenario over an interval/decimation grid")
    swp.add_argument("--scenario", required=True, help="Base scenario YAML file")
    swp.add_argument("--interval", type=float, nargs="+", default=[0.01, 0.02, 0.05, 0.1],
                     help="Logging intervals in seconds")
    swp.add_argument("--decimation", type=int, nargs="+", default=[1], help="Decimation factors")
    swp.add_argument("--jobs", "-j", type=int, default=1, help="Grid points simulated in parallel")
    swp.set_defaults(handler=cmd_sweep)

    gen = commands.add_parser("gen-waveform"
, parents=[common], help="Write a synthetic waveform CSV")
    gen.add_argument("--scenario", help="Take waveform parameters from this scenario")
    gen.add_argument("--duration", type=float, default=1.0, help="Seconds of waveform")
    gen.add_argument("--meter-number", type=int, default=1)
    gen.set_defaults(handler=cmd_gen_waveform)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except CONFIG_ERRORS as e:
        error_console.print(Text.assemble(("error: ", "bold red"), str(e)), soft_wrap=True)
        return 1
    except OSError as e:
        error_console.print(Text.assemble(("I/O error: ", "bold red"), str(e)), soft_wrap=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
