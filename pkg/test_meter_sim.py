#!/usr/bin/env python3
"""
Tests for running scenarios end to end and the command line
"""

from pathlib import Path

import pytest

import pandas as pd

from config_manager import ConfigManager
from meter_sim import COMPARISON_COLUMNS, compare, main, render_comparison, run_scenario, sweep, sweep_scenarios
from metrics import MANIFEST_NAME, import_csv, read_manifest, read_summary, sha256_file
from plugin_system import PluginManager
from scenario import ScenarioError, parse_scenario

TINY = """\
name: tiny
duration: 0.5
seed: 7
drain: 0.2
meters:
  - {id: meter1, src: h1, dst: h5, logging_interval: 0.01, adaptive: true, detector: ewma}
  - {id: meter2, src: h4, dst: h8, logging_interval: 0.1, decimation: 8}
cross_traffic:
  - {id: x1, src: h2, dst: h6, rate: 5000000, frame_size: 1000, start_jitter: 0.01}
"""


def write_scenario(directory: Path, text: str = TINY, name: str = "tiny.yaml") -> Path:
    path = directory / name
    path.write_text(text)
    return path


@pytest.fixture
def tiny(tmp_path):
    return parse_scenario(write_scenario(tmp_path), ConfigManager().load_all_configs(), PluginManager())


def test_run_writes_artifacts_and_manifest(tiny, tmp_path):
    run = run_scenario(tiny, tmp_path / "out")
    names = sorted(p.name for p in run.artifacts)
    assert names == ["control_meter1.csv", "control_meter2.csv", "delays_meter1.csv", "delays_meter2.csv",
                     "summary.txt", "trace.csv", "verdicts_meter1.csv", "verdicts_meter2.csv"]
    manifest = read_manifest(tmp_path / "out" / MANIFEST_NAME)
    assert sorted(manifest) == names
    for artifact in run.artifacts:
        assert manifest[artifact.name] == (artifact.stat().st_size, sha256_file(artifact))

    summary = read_summary(tmp_path / "out" / "summary.txt")
    assert summary["scenario.name"] == "tiny"
    assert summary["flow.meter1.packets_submitted"] == "50"
    assert summary["flow.meter2.packets_submitted"] == "5"
    assert summary["flow.meter2.final_decimation"] == "8"
    assert summary["flow.meter1.conservation"] == "True"
    assert "cross.x1.frames_sent" in summary


def test_delay_records_match_the_summary(tiny, tmp_path):
    run = run_scenario(tiny, tmp_path / "out")
    records = import_csv(tmp_path / "out" / "delays_meter2.csv")
    assert [r.seq for r in records] == list(range(5))
    assert all(r.size_bytes == 1416 for r in records)
    meter2 = next(f for f in run.flows if f.flow_id == "meter2")
    assert meter2.packet_size == 1416
    assert meter2.values["delivered_count"] == 5


def test_fixed_flow_gets_header_only_control_log(tiny, tmp_path):
    run_scenario(tiny, tmp_path / "out")
    assert len((tmp_path / "out" / "control_meter2.csv").read_text().splitlines()) == 1


def test_reruns_are_byte_identical(tiny, tmp_path):
    first = run_scenario(tiny, tmp_path / "a")
    run_scenario(tiny, tmp_path / "b")
    for artifact in first.artifacts + [tmp_path / "a" / MANIFEST_NAME]:
        assert (tmp_path / "b" / artifact.name).read_bytes() == artifact.read_bytes(), artifact.name


def test_cli_run(tmp_path, capsys):
    path = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == 0
    assert "meter1" in capsys.readouterr().out
    assert (tmp_path / "out" / MANIFEST_NAME).exists()


def test_cli_seed_override(tmp_path):
    path = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out"), "--seed", "9", "-q"]) == 0
    assert read_summary(tmp_path / "out" / "summary.txt")["scenario.seed"] == "9"


def test_cli_invalid_scenario_exits_1(tmp_path, capsys):
    path = write_scenario(tmp_path, "duration: 1\nmeters:\n  - {src: h1, dst: h9}\n", "bad.yaml")
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "unknown host 'h9'" in err
    assert "bad.yaml:3" in err


def test_cli_io_failures_exit_2(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "absent.yaml")]) == 2
    assert "cannot read scenario" in capsys.readouterr().err
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    path = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(path), "--out", str(blocker / "out"), "-q"]) == 2


def test_cli_broken_defaults_exit_1(tmp_path):
    custom = tmp_path / "custom"
    custom.mkdir()
    (custom / "bad.yaml").write_text("policy: {mode: guess}\n")
    path = write_scenario(tmp_path)
    assert main(["run", "--scenario", str(path), "--custom-dir", str(custom), "-q"]) == 1


def test_compare_two_scenarios(tmp_path, capsys):
    first = write_scenario(tmp_path)
    second = write_scenario(tmp_path, TINY.replace("name: tiny", "name: tiny_slow")
                            .replace("logging_interval: 0.01, adaptive: true, detector: ewma",
                                     "logging_interval: 0.1"), "tiny_slow.yaml")
    rows = compare([str(first), str(second)], tmp_path / "cmp")
    assert [r.label for r in rows] == ["tiny/meter1", "tiny/meter2", "tiny_slow/meter1", "tiny_slow/meter2"]
    assert rows[0].packet_size == 1136 and rows[2].packet_size == 11216
    table = pd.read_csv(tmp_path / "cmp" / "comparison.csv")
    assert list(table.columns) == COMPARISON_COLUMNS
    assert len(table) == 4
    assert (tmp_path / "cmp" / "00_tiny" / MANIFEST_NAME).exists()
    assert "tiny_slow/meter1" in render_comparison(rows)

    out = tmp_path / "cli"
    assert main(["compare", "--scenario", str(first), str(second), "--out", str(out)]) == 0
    assert "tiny_slow/meter2" in capsys.readouterr().out
    assert pd.read_csv(out / "comparison.csv").equals(table)


def test_compare_rejects_mismatched_inputs(tmp_path):
    first = write_scenario(tmp_path)
    longer = write_scenario(tmp_path, TINY.replace("duration: 0.5", "duration: 0.6"), "longer.yaml")
    with pytest.raises(ScenarioError, match="at least two"):
        compare([str(first)], tmp_path / "cmp")
    with pytest.raises(ScenarioError, match="differ in duration"):
        compare([str(first), str(longer)], tmp_path / "cmp")
    assert main(["compare", "--scenario", str(first), str(longer), "--out", str(tmp_path / "c")]) == 1


def test_sweep_over_intervals_and_decimations(tmp_path, capsys):
    path = write_scenario(tmp_path)
    rows = sweep(str(path), [0.1, 0.01], [2, 1], tmp_path / "grid")
    assert [r.label for r in rows[::2]] == ["tiny_i0.01_d1/meter1", "tiny_i0.01_d2/meter1",
                                            "tiny_i0.1_d1/meter1", "tiny_i0.1_d2/meter1"]
    assert [r.packet_size for r in rows[::2]] == [1136, 576, 11216, 5616]
    assert [r.interval for r in rows[::2]] == [0.01, 0.01, 0.1, 0.1]
    table = pd.read_csv(tmp_path / "grid" / "comparison.csv")
    assert list(table.columns) == COMPARISON_COLUMNS
    assert len(table) == 8
    assert (tmp_path / "grid" / "03_tiny_i0.1_d2" / MANIFEST_NAME).exists()

    out = tmp_path / "cli"
    assert main(["sweep", "--scenario", str(path), "--interval", "0.1", "--decimation", "1", "8",
                 "--out", str(out)]) == 0
    assert "tiny_i0.1_d8/meter2" in capsys.readouterr().out
    assert len(pd.read_csv(out / "comparison.csv")) == 4


def test_sweep_rejects_bad_grids(tiny, tmp_path):
    with pytest.raises(ScenarioError):
        sweep_scenarios(tiny, [], [1])
    path = write_scenario(tmp_path)
    assert main(["sweep", "--scenario", str(path), "--decimation", "3", "--out", str(tmp_path / "a")]) == 1
    assert main(["sweep", "--scenario", str(path), "--interval", "0.0003", "--out", str(tmp_path / "b")]) == 1


def test_gen_waveform(tmp_path):

    out = tmp_path / "wave.csv"
    assert main(["gen-waveform", "--duration", "0.01", "--out", str(out), "-q"]) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 80 * 3
    assert sorted(frame["phase"].unique()) == [0, 1, 2]
    again = tmp_path / "again.csv"
    assert main(["gen-waveform", "--duration", "0.01", "--out", str(again), "-q"]) == 0
    assert again.read_bytes() == out.read_bytes()
    other = tmp_path / "other.csv"
    assert main(["gen-waveform", "--duration", "0.01", "--out", str(other), "--seed", "5", "-q"]) == 0
    assert other.read_bytes() != out.read_bytes()
