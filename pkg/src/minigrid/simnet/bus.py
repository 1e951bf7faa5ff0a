"""Simulated network between endpoints, with failure injection and site gateways.

Agents at a private site are reachable from outside only through their
site gateway; a message addressed directly to them is refused.  All calls
are evaluated between events, so a synchronous ``call`` is atomic with
respect to the rest of the simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from ..errors import DeliveryRefused, ServiceDown, UnknownTarget, Unreachable
from .clock import SimClock


@dataclass
class Endpoint:
    name: str
    site: str
    kind: str
    up: bool = True


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    fn: Callable
    args: tuple = ()
    label: str = ""


@dataclass
class Gateway:
    """Gatekeeper and proxy for the services of one site."""

    site: str
    bus: "Bus"
    routed: int = 0

    @property
    def name(self) -> str:
        return gateway_name(self.site)

    def route(self, message: Message):
        if not self.bus.is_up(self.name):
            raise ServiceDown(f"gateway of {self.site} is down")
        dst = self.bus.endpoint(message.dst)
        if dst.site != self.site:
            raise DeliveryRefused(f"{message.dst} is not behind gateway {self.name}")
        if not dst.up:
            raise ServiceDown(f"{message.dst} is down")
        self.routed += 1
        return message.fn(*message.args)


def gateway_name(site: str) -> str:
    return f"gateway:{site}"


class Bus:
    def __init__(self, clock: SimClock, latency: float = 0.1):
        self.clock = clock
        self.latency = latency
        self.endpoints: dict[str, Endpoint] = {}
        self.private_sites: set = set()
        self.gateways: dict[str, Gateway] = {}
        self.partitioned: set = set()
        self.dropped = 0
        self.delivered = 0

    def register(self, name: str, site: str, kind: str) -> Endpoint:
        ep = Endpoint(name, site, kind)
        self.endpoints[name] = ep
        return ep

    def add_site(self, site: str, private: bool = False) -> Gateway:
        gw = self.gateways.get(site)
        if gw is None:
            gw = self.gateways[site] = Gateway(site, self)
            self.register(gw.name, site, "gateway")
        if private:
            self.private_sites.add(site)
        return gw

    def endpoint(self, name: str) -> Endpoint:
        try:
            return self.endpoints[name]
        except KeyError:
            raise UnknownTarget(name) from None

    def is_up(self, name: str) -> bool:
        ep = self.endpoints.get(name)
        return ep is not None and ep.up

    def set_up(self, name: str, up: bool):
        self.endpoint(name).up = up

    def _path_ok(self, src: Endpoint, dst: Endpoint) -> bool:
        if not (src.up and dst.up):
            return False
        if src.site == dst.site:
            return True
        if src.site in self.partitioned or dst.site in self.partitioned:
            return False
        for ep in (src, dst):
            if ep.site in self.private_sites and not self.is_up(gateway_name(ep.site)):
                return False
        return True

    def reachable(self, src: str, dst: str) -> bool:
        return self._path_ok(self.endpoint(src), self.endpoint(dst))

    def call(self, src: str, dst: str, fn: Callable, *args):
        """Synchronous request/response; raises Unreachable when the path is cut."""
        s, d = self.endpoint(src), self.endpoint(dst)
        if not self._path_ok(s, d):
            self.dropped += 1
            raise Unreachable(f"{src} -> {dst}")
        self.delivered += 1
        if s.site != d.site and d.site in self.private_sites:
            return self.gateways[d.site].route(Message(src, dst, fn, args))
        return fn(*args)

    def send(self, src: str, dst: str, fn: Callable, *args, direct: bool = False) -> bool:
        """One-way message delivered after ``latency``; FIFO per (src, dst).

        ``direct=True`` bypasses the gateway, which private sites refuse.
        Returns False when the message is dropped at send time.
        """
        s, d = self.endpoint(src), self.endpoint(dst)
        if direct and s.site != d.site and d.site in self.private_sites:
            raise DeliveryRefused(f"{dst} is on a private network; use its gateway")
        if not self._path_ok(s, d):
            self.dropped += 1
            return False

        def deliver():
            if not self._path_ok(s, d):
                self.dropped += 1
                return
            self.delivered += 1
            if s.site != d.site and d.site in self.private_sites:
                try:
                    self.gateways[d.site].route(Message(src, dst, fn, args))
                except ServiceDown:
                    self.dropped += 1
            else:
                fn(*args)

        self.clock.schedule(self.latency, deliver)
        return True
