"""Deterministic discrete-event harness for whole-grid scenarios."""

from .bus import Bus, Endpoint, Gateway, Message, gateway_name
from .clock import Event, SimClock
from .federation import FederationGateway, federate
from .runner import RunMetrics, Simulation, check_invariants, inject_fault, run_scenario
from .runtime import Counters, GridRuntime
from .scenario import FaultDecl, Scenario, Settings, load_scenario, parse_scenario

__all__ = [
    "Bus", "Counters", "Endpoint", "Event", "FaultDecl", "FederationGateway", "Gateway", "GridRuntime", "Message",
    "RunMetrics", "Scenario", "Settings", "SimClock", "Simulation", "check_invariants", "federate", "gateway_name",
    "inject_fault", "load_scenario", "parse_scenario", "run_scenario",
]
