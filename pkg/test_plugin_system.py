#!/usr/bin/env python3
"""
Tests for detector discovery and creation
"""

import pytest

from detect import DetectorError, EwmaDetector, FeatureVector, VerdictLevel
from plugin_system import PluginInfo, PluginManager, PluginType

BROKEN_PLUGIN = "raise RuntimeError('import-time failure')\n"

EXTRA_PLUGIN = '''
from detect import DetectorVerdict, VerdictLevel
from plugin_system import DetectorPlugin, PluginInfo, PluginType


class Silent(DetectorPlugin):
    name = "silent"

    @classmethod
    def plugin_info(cls):
        return PluginInfo("silent", "0.1.0", "Never alarms", "tests", PluginType.DETECTOR, [])

    def update(self, x):
        return DetectorVerdict(VerdictLevel.NORMAL, 0.0, (1.0, 2.0))


class Disabled(Silent):
    name = "disabled"

    @classmethod
    def plugin_info(cls):
        return PluginInfo("disabled", "0.1.0", "Switched off", "tests", PluginType.DETECTOR, [], enabled=False)
'''


def fv(mean_delay: float) -> FeatureVector:
    return FeatureVector(mean_delay, 0.0001, 0.0, 1e6)


def test_builtin_detectors_without_discovery():
    manager = PluginManager(discover=False)
    assert manager.available() == ["ewma", "koad", "pca"]
    assert manager.infos["ewma"].author == "built-in"
    assert isinstance(manager.create("ewma"), EwmaDetector)


def test_shipped_plugins_are_discovered():
    manager = PluginManager()
    assert "delay_gradient" in manager.available()
    assert manager.infos["delay_gradient"].plugin_type == PluginType.DETECTOR


def test_delay_gradient_flags_a_rising_delay():
    detector = PluginManager().create("delay_gradient", {"trend_windows": 4, "smoothing": 0.0})
    levels = [detector.observe(fv(0.001)).level for _ in range(6)]
    assert levels == [VerdictLevel.NORMAL] * 6
    levels = [detector.observe(fv(0.001 + 0.002 * k)).level for k in range(1, 5)]
    assert levels[-1] == VerdictLevel.RED


def test_delay_gradient_parameter_validation():
    manager = PluginManager()
    with pytest.raises(DetectorError):
        manager.create("delay_gradient", {"trend_windows": 1})
    with pytest.raises(DetectorError):
        manager.create("delay_gradient", {"window": 4})


def test_external_plugin_directory(tmp_path):
    (tmp_path / "silent.py").write_text(EXTRA_PLUGIN)
    (tmp_path / "broken.py").write_text(BROKEN_PLUGIN)
    (tmp_path / "_private.py").write_text(BROKEN_PLUGIN)
    manager = PluginManager(str(tmp_path))
    assert "silent" in manager.available()
    assert "disabled" not in manager.available()
    assert manager.create("silent").observe(fv(9.0)).level == VerdictLevel.NORMAL


def test_missing_plugin_directory(tmp_path):
    manager = PluginManager(str(tmp_path / "absent"))
    assert manager.available() == ["ewma", "koad", "pca"]


def test_unknown_detector_and_duplicate_registration():
    manager = PluginManager(discover=False)
    with pytest.raises(DetectorError, match="unknown detector 'oracle'"):
        manager.create("oracle")
    info = PluginInfo("ewma", "2.0.0", "clash", "tests", PluginType.DETECTOR, [])
    with pytest.raises(DetectorError, match="registered twice"):
        manager.register(EwmaDetector, info)


def test_created_detectors_are_independent():
    manager = PluginManager(discover=False)
    a, b = manager.create("ewma"), manager.create("ewma")
    a.observe(fv(0.001))
    assert len(a.history) == 1 and len(b.history) == 0
