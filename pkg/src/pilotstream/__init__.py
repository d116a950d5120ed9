"""pilotstream: a desk-scale streaming stack.

An embedded partitioned log broker, a micro-batch stream engine with
pilot-managed worker pools, rate-controlled data sources, analysis
operators (streaming K-Means, tomographic reconstruction), and a metrics
registry feeding CSV benchmark reports.
"""

from . import broker, engine, errors, masa, mass, metrics, pilot
from .broker import Broker, TopicConfig
from .engine import StreamDefinition, StreamEngine, register_operator
from .errors import PilotStreamError
from .mass import SourceConfig, make_scenario, run_producers
from .metrics import MetricsRegistry
from .pilot import (
    PilotComputeDescription,
    PilotComputeService,
    register_function,
    register_plugin,
)

__version__ = "0.1.0"

__all__ = [
    "Broker",
    "MetricsRegistry",
    "PilotComputeDescription",
    "PilotComputeService",
    "PilotStreamError",
    "SourceConfig",
    "StreamDefinition",
    "StreamEngine",
    "TopicConfig",
    "broker",
    "engine",
    "errors",
    "make_scenario",
    "masa",
    "mass",
    "metrics",
    "pilot",
    "register_function",
    "register_operator",
    "register_plugin",
    "run_producers",
]
