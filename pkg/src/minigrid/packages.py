"""VO software: dependency resolution and per-site shared repositories."""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .config import PackageSpec, split_ref, version_key
from .errors import CycleDetected, NotFound, NotInstalled, UnknownPackage, VersionConflict


class Resolver:
    """Turns requested package refs into a dependency-ordered install plan.

    ``any`` picks the highest available version unless an exact constraint on
    the same name appears somewhere in the closure, in which case the exact
    pin wins.  Two different exact pins on one name are a conflict.
    """

    def __init__(self, packages: dict, lfn_exists: Callable[[str], bool] | None = None):
        self.packages = packages  # (name, version) -> PackageSpec
        self.lfn_exists = lfn_exists
        self._versions: dict[str, list[str]] = {}
        for (n, v) in packages:
            self._versions.setdefault(n, []).append(v)
        for n in self._versions:
            self._versions[n].sort(key=version_key)

    def _pick(self, name, version, pins):
        if name not in self._versions:
            raise UnknownPackage(name)
        if version is not None:
            if (name, version) not in self.packages:
                raise UnknownPackage(f"{name}::{version}")
            return version
        return pins.get(name, self._versions[name][-1])

    def resolve(self, requested: Iterable) -> list[PackageSpec]:
        reqs = [split_ref(r) if isinstance(r, str) else tuple(r) for r in requested]
        pins: dict[str, str] = {}
        for name, version in reqs:
            if version is not None:
                if pins.get(name, version) != version:
                    raise VersionConflict(f"{name}: {pins[name]} vs {version}")
                pins[name] = version
        while True:
            chosen, edges, exact = self._closure(reqs, pins)
            new = False
            for name, versions in exact.items():
                if len(versions) > 1:
                    raise VersionConflict(f"{name}: {' vs '.join(sorted(versions, key=version_key))}")
                (v,) = versions
                if pins.get(name) != v:
                    if name in pins:
                        raise VersionConflict(f"{name}: {pins[name]} vs {v}")
                    pins[name] = v
                    new = True
            if not new:
                break
        plan = self._toposort(chosen, edges)
        if self.lfn_exists is not None:
            for spec in plan:
                if spec.lfn and not self.lfn_exists(spec.lfn):
                    raise NotFound(f"package tarball {spec.lfn} for {spec.ref}")
        return plan

    def _closure(self, reqs, pins):
        chosen: dict[str, str] = {}
        edges: dict[tuple, set] = {}
        exact: dict[str, set] = {}
        for name, version in reqs:
            if version is not None:
                exact.setdefault(name, set()).add(version)
        stack = [(n, self._pick(n, v, pins)) for n, v in reqs]
        while stack:
            name, version = stack.pop()
            if name in chosen:
                # an any-pick disagreeing with an exact pin settles on the next round
                continue
            chosen[name] = version
            spec = self.packages[(name, version)]
            deps = set()
            for dn, dv in spec.depends:
                if dv is not None:
                    exact.setdefault(dn, set()).add(dv)
                pv = self._pick(dn, dv, pins)
                deps.add((dn, pv))
                stack.append((dn, pv))
            edges[(name, version)] = deps
        return chosen, edges, exact

    def _toposort(self, chosen, edges) -> list[PackageSpec]:
        nodes = [(n, v) for n, v in chosen.items()]
        indeg = {k: 0 for k in nodes}
        users: dict[tuple, list] = {k: [] for k in nodes}
        for k in nodes:
            for d in edges[k]:
                if d in indeg:
                    indeg[k] += 1
                    users[d].append(k)
        heap = [k for k in nodes if indeg[k] == 0]
        heapq.heapify(heap)
        out = []
        while heap:
            k = heapq.heappop(heap)
            out.append(self.packages[k])
            for u in users[k]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    heapq.heappush(heap, u)
        if len(out) != len(nodes):
            stuck = sorted(k for k, d in indeg.items() if d > 0)
            raise CycleDetected("dependency cycle among " + ", ".join(f"{n}::{v}" for n, v in stuck))
        return out


@dataclass
class SiteRepo:
    """Shared package area of one site."""

    site: str
    installed: set = field(default_factory=set)
    install_log: list = field(default_factory=list)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def install(self, plan: list[PackageSpec]) -> list[PackageSpec]:
        """Install missing plan items in order; returns what was newly installed."""
        done = []
        with self._lock:
            for spec in plan:
                key = (spec.name, spec.version)
                if key in self.installed:
                    continue
                self.installed.add(key)
                self.install_log.append(("install", spec.name, spec.version, tuple(spec.setup)))
                done.append(spec)
        return done

    def remove(self, name: str, version: str):
        with self._lock:
            if (name, version) not in self.installed:
                raise NotInstalled(f"{name}::{version} at {self.site}")
            self.installed.discard((name, version))
            self.install_log.append(("remove", name, version, ()))

    def refs(self) -> list[str]:
        return [f"{n}::{v}" for n, v in sorted(self.installed, key=lambda k: (k[0], version_key(k[1])))]


def install(plan, repo: SiteRepo):
    return repo.install(plan)


def remove(name: str, version: str, repo: SiteRepo):
    repo.remove(name, version)
