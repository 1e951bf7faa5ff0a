"""Per-grid view of a running simulation, as seen by agents."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from ..grid import Grid
from ..site.agents import ComputingElementAgent
from .bus import Bus
from .clock import SimClock


@dataclass
class Counters:
    bytes_staged: int = 0
    bytes_written: int = 0
    bytes_transferred: int = 0
    heartbeats: int = 0
    stale_reports: int = 0
    max_running: int = 0
    zombies: int = 0
    optimizer_transfers: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


class GridRuntime:
    """Bundles what an agent of one grid needs: clock, bus, services, tracing."""

    def __init__(self, sim, grid: Grid, prefix: str = ""):
        self.sim = sim
        self.grid = grid
        self.prefix = prefix
        self.clock: SimClock = sim.clock
        self.bus: Bus = sim.bus
        self.heartbeat = sim.settings.heartbeat
        self.metrics = Counters()
        self.agents: dict = {}  # local name -> agent
        self.gateways: dict = {}  # local name -> FederationGateway (as CE of this grid)
        self.broker_ep = self.ep("broker")

    def ep(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def site(self, name: str) -> str:
        return self.ep(name)

    def central(self, src: str, fn):
        """Call the central services of this grid from endpoint ``src``."""
        return self.bus.call(src, self.broker_ep, lambda: fn(self.grid.broker))

    def trace(self, kind: str, subject, detail: str = ""):
        self.sim.trace(kind, self.ep(str(subject)) if self.prefix else subject, detail)

    def ce_agents(self) -> list:
        return [a for _, a in sorted(self.agents.items()) if isinstance(a, ComputingElementAgent)]

    def capacity(self) -> int:
        """Total job slots this grid offers, federated gateways included."""
        return sum(a.capacity() if hasattr(a, "capacity") else a.spec.max_slots for a in self.ce_agents())
