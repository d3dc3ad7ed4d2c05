"""System-level simulator for cellular downlink multicast of a mobile-TV stream."""

from .config import SimulationConfig, load_config
from .engine import run

__version__ = "0.1.0"
__all__ = ["SimulationConfig", "load_config", "run", "__version__"]
