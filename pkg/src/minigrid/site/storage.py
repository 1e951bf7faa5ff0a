"""Storage Element: permanent area plus an LRU cache for staged files."""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property

from ..errors import InsufficientSpace, IntegrityError, NotFound

PERMANENT, CACHE = "permanent", "cache"


@dataclass(frozen=True)
class Blob:
    """File content.  Large simulated files carry only (size, seed)."""

    size: int
    seed: str = ""
    payload: bytes | None = None

    @classmethod
    def of(cls, payload: bytes) -> "Blob":
        return cls(len(payload), "", payload)

    @cached_property
    def digest(self) -> str:
        if self.payload is not None:
            return hashlib.sha256(self.payload).hexdigest()
        return hashlib.sha256(f"synthetic:{self.size}:{self.seed}".encode()).hexdigest()


@dataclass
class StorageElement:
    name: str
    capacity: int
    site: str = ""
    protocol: str = "sim"
    permanent: dict = field(default_factory=dict)  # path -> (Blob, digest at store time)
    cache: OrderedDict = field(default_factory=OrderedDict)
    used: int = 0
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def free(self) -> int:
        return self.capacity - self.used

    def available(self) -> int:
        """Room for a permanent write once every cached file is evicted."""
        return self.capacity - sum(b.size for b, _ in self.permanent.values())

    def has(self, path: str) -> bool:
        return path in self.permanent or path in self.cache

    def _evict_for(self, needed: int):
        while self.free < needed and self.cache:
            _, (blob, _) = self.cache.popitem(last=False)
            self.used -= blob.size

    def store(self, path: str, blob: Blob, cls: str = PERMANENT) -> str:
        """Write ``blob`` at ``path``, evicting LRU cache entries if needed."""
        with self._lock:
            old_cls = PERMANENT if path in self.permanent else CACHE if path in self.cache else None
            old = self.permanent.pop(path, None) or self.cache.pop(path, None)
            if old is not None:
                self.used -= old[0].size
            self._evict_for(blob.size)
            if blob.size > self.free:
                if old is not None:
                    (self.permanent if old_cls == PERMANENT else self.cache)[path] = old
                    self.used += old[0].size
                raise InsufficientSpace(f"{self.name}: need {blob.size} bytes, {self.free} free")
            entry = (blob, blob.digest)
            (self.cache if cls == CACHE else self.permanent)[path] = entry
            self.used += blob.size
            return entry[1]

    def fetch(self, path: str) -> Blob:
        with self._lock:
            if path in self.permanent:
                blob, digest = self.permanent[path]
            elif path in self.cache:
                self.cache.move_to_end(path)
                blob, digest = self.cache[path]
            else:
                raise NotFound(f"{self.name}:{path}")
            if blob.digest != digest:
                raise IntegrityError(f"{self.name}:{path} digest mismatch")
            return blob

    def digest_of(self, path: str) -> str:
        with self._lock:
            hit = self.permanent.get(path) or self.cache.get(path)
            if hit is None:
                raise NotFound(f"{self.name}:{path}")
            return hit[1]

    def delete(self, path: str):
        with self._lock:
            hit = self.permanent.pop(path, None) or self.cache.pop(path, None)
            if hit is None:
                raise NotFound(f"{self.name}:{path}")
            self.used -= hit[0].size

    def check(self):
        held = sum(b.size for b, _ in self.permanent.values()) + sum(b.size for b, _ in self.cache.values())
        assert held == self.used, (self.name, held, self.used)
        assert self.used <= self.capacity, (self.name, self.used, self.capacity)


def se_store(se: StorageElement, path: str, blob: Blob, cls: str = PERMANENT) -> str:
    return se.store(path, blob, cls)


def se_fetch(se: StorageElement, path: str) -> Blob:
    return se.fetch(path)
