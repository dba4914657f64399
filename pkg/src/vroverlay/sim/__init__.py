"""Deterministic discrete-event network simulation harness."""

from .core import EventLoop, SimLink, SimNetwork, deliver_or_drop, link_stream_seed
from .scenario import Scenario, load_scenario, load_scenario_file
from .harness import OverlaySim, SimReport

__all__ = [
    "EventLoop",
    "SimLink",
    "SimNetwork",
    "deliver_or_drop",
    "link_stream_seed",
    "Scenario",
    "load_scenario",
    "load_scenario_file",
    "OverlaySim",
    "SimReport",
]
