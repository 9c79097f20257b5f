"""Desk-scale V2X intersection security testbed: signed messaging, attacks, detection and mitigation."""

from .errors import FixtureError, V2XError
from .fixture import build_world, load_fixture
from .metrics import RunMetrics, simulate
from .world import SimConfig, World

__version__ = "0.1.0"

__all__ = ["FixtureError", "RunMetrics", "SimConfig", "V2XError", "World", "build_world", "load_fixture",
           "simulate", "__version__"]
