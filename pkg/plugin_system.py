#!/usr/bin/env python3
"""
Plugin System for the Smart Meter Network Simulator

Detectors are created by name. The EWMA, PCA and KOAD detectors are built in;
additional detectors are discovered as DetectorPlugin subclasses in the
plugins directory.
"""

import importlib.util
import inspect
import logging
from abc import abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Type

from detect import BUILTIN_DETECTORS, Detector, DetectorError

logger = logging.getLogger(__name__)

PLUGIN_DIR = Path(__file__).resolve().parent / "plugins"


class PluginType(Enum):
    """Types of plugins supported"""
    DETECTOR = "detector"


@dataclass
class PluginInfo:
    """Plugin metadata"""
    name: str
    version: str
    description: str
    author: str
    plugin_type: PluginType
    dependencies: List[str]
    enabled: bool = True


class DetectorPlugin(Detector):
    """Base class for detectors shipped as plugins"""

    @classmethod
    @abstractmethod
    def plugin_info(cls) -> PluginInfo:
        """Plugin information and metadata"""

    @property
    def info(self) -> PluginInfo:
        return self.plugin_info()


def _builtin_info(name: str, cls: Type[Detector]) -> PluginInfo:
    summary = (inspect.getdoc(cls) or f"{name} detector").splitlines()[0]
    return PluginInfo(name=name, version="1.0.0", description=summary, author="built-in",
                      plugin_type=PluginType.DETECTOR, dependencies=["numpy"])


class PluginManager:
    """Registry of detector factories"""

    def __init__(self, plugin_dir: Optional[str] = None, discover: bool = True):
        self.plugin_dir = Path(plugin_dir) if plugin_dir else PLUGIN_DIR
        self.registry: Dict[str, Type[Detector]] = {}
        self.infos: Dict[str, PluginInfo] = {}
        for name, cls in BUILTIN_DETECTORS.items():
            self.register(cls, _builtin_info(name, cls))
        if discover:
            self.load_all_plugins()

    def register(self, cls: Type[Detector], info: PluginInfo) -> None:
        if info.name in self.registry:
            raise DetectorError(f"detector {info.name} registered twice")
        self.registry[info.name] = cls
        self.infos[info.name] = info

    def discover_plugins(self) -> List[Path]:
        """Plugin modules in the plugin directory"""
        if not self.plugin_dir.is_dir():
            return []
        return sorted(p for p in self.plugin_dir.glob("*.py") if not p.name.startswith("_"))

    def load_plugin(self, path: Path) -> int:
        """Import one module and register its DetectorPlugin classes"""
        spec = importlib.util.spec_from_file_location(f"meter_sim_plugins.{path.stem}", path)
        if spec is None or spec.loader is None:
            logger.warning("Cannot import plugin %s", path)
            return 0
        module = importlib.util.module_from_spec(spec)
        try:
            spec.loader.exec_module(module)
        except Exception as e:
            logger.warning("Error loading plugin %s: %s", path.name, e)
            return 0

        count = 0
        for _, obj in inspect.getmembers(module, inspect.isclass):
            if issubclass(obj, DetectorPlugin) and obj is not DetectorPlugin and not inspect.isabstract(obj):
                info = obj.plugin_info()
                if not info.enabled:
                    continue
                self.register(obj, info)
                logger.debug("Loaded detector plugin %s v%s", info.name, info.version)
                count += 1
        return count

    def load_all_plugins(self) -> int:
        loaded = sum(self.load_plugin(path) for path in self.discover_plugins())
        if loaded:
            logger.debug("Loaded %d detector plugins from %s", loaded, self.plugin_dir)
        return loaded

    def available(self) -> List[str]:
        return sorted(self.registry)

    def create(self, name: str, params: Optional[Dict[str, Any]] = None) -> Detector:
        """Instantiate a fresh detector"""
        try:
            cls = self.registry[name]
        except KeyError:
            raise DetectorError(f"unknown detector '{name}', available: {self.available()}") from None
        return cls(params or {})
