"""Central event log that every service reports status and errors to."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

SEVERITIES = ("info", "warn", "error")


@dataclass(frozen=True)
class LogEvent:
    time: float
    seq: int
    source: str
    severity: str
    message: str
    subject: str = "-"

    def line(self) -> str:
        return f"{self.time:.3f} {self.severity} {self.source} {self.subject} {self.message}"


class EventLog:
    def __init__(self, clock: Callable[[], float] | None = None):
        self.clock = clock or (lambda: 0.0)
        self.events: list[LogEvent] = []
        self._lock = threading.Lock()

    def log(self, source: str, severity: str, message: str, subject="-", time: float | None = None) -> LogEvent:
        if severity not in SEVERITIES:
            raise ValueError(f"unknown severity {severity!r}")
        with self._lock:
            t = self.clock() if time is None else time
            if self.events and t < self.events[-1].time:
                t = self.events[-1].time
            ev = LogEvent(t, len(self.events), source, severity, message, str(subject))
            self.events.append(ev)
            return ev

    def info(self, source, message, subject="-"):
        return self.log(source, "info", message, subject)

    def warn(self, source, message, subject="-"):
        return self.log(source, "warn", message, subject)

    def error(self, source, message, subject="-"):
        return self.log(source, "error", message, subject)

    def query(self, severity: str | None = None, source: str | None = None, subject=None, since: float | None = None) -> list[LogEvent]:
        out = []
        for ev in self.events:
            if severity is not None and ev.severity != severity:
                continue
            if source is not None and ev.source != source:
                continue
            if subject is not None and ev.subject != str(subject):
                continue
            if since is not None and ev.time < since:
                continue
            out.append(ev)
        return out

    def __len__(self):
        return len(self.events)

    def dump(self, events=None) -> str:
        return "".join(ev.line() + "\n" for ev in (self.events if events is None else events))
