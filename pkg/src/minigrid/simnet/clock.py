"""Virtual clock and event queue ordered by (time, sequence)."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable


@dataclass(order=True)
class Event:
    time: float
    seq: int
    fn: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self):
        self.cancelled = True


class SimClock:
    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list[Event] = []
        self._seq = 0
        self.steps = 0

    def __call__(self) -> float:
        return self.now

    def at(self, time: float, fn: Callable, *args) -> Event:
        if time < self.now:
            time = self.now
        self._seq += 1
        ev = Event(time, self._seq, fn, args)
        heapq.heappush(self._queue, ev)
        return ev

    def schedule(self, delay: float, fn: Callable, *args) -> Event:
        return self.at(self.now + max(0.0, delay), fn, *args)

    def peek(self) -> float | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def step(self) -> bool:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.time
            self.steps += 1
            ev.fn(*ev.args)
            return True
        return False

    def run(self, until: float | None = None, stop: Callable[[], bool] | None = None) -> float:
        while True:
            if stop is not None and stop():
                break
            t = self.peek()
            if t is None or (until is not None and t > until):
                if until is not None and t is not None:
                    self.now = max(self.now, until)
                break
            self.step()
        return self.now
