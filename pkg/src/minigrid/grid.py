"""One VO's central services wired together.

A :class:`Grid` owns the catalogue, the task queue, the storage elements,
the per-site package repositories, the token service and the event log.
Simulations and the shell both drive a grid through this object.
"""

from __future__ import annotations

import base64
import json
import posixpath
from pathlib import Path
from typing import Callable

from .auth import ADMIN, Principal, TokenService
from .broker import Broker
from .catalogue import Catalogue, PhysicalLocation
from .config import VOConfig
from .errors import AlreadyExists, NameClash, NotFound
from .journal import Journal
from .logger import EventLog
from .optimizer import PolicyMonitor
from .packages import Resolver, SiteRepo
from .site.storage import Blob, StorageElement


class Grid:
    def __init__(
        self,
        config: VOConfig,
        clock: Callable[[], float] | None = None,
        seed: int = 0,
        state_dir: str | Path | None = None,
        name: str = "main",
        snapshot_every: int = 0,
    ):
        self.config = config
        self.name = name
        self.clock = clock or (lambda: 0.0)
        self.seed = seed
        self.state_dir = Path(state_dir) if state_dir is not None else None
        self.log = EventLog(self.clock)
        self.storage: dict[str, StorageElement] = {
            se.name: StorageElement(se.name, se.capacity, se.site, se.protocol)
            for se in config.storage_elements.values()
        }
        self.repos: dict[str, SiteRepo] = {}
        for site in sorted({ce.site for ce in config.computing_elements.values()} | set(config.sites)):
            self.repos[site] = SiteRepo(site)
        self.tokens = TokenService(config.token_users(), self.clock)
        self.resolver = Resolver(config.packages)
        self.listeners: list[Callable] = []
        self.broker_up = True

        cat_state, cat_records, br_records = None, None, None
        if self.state_dir is not None and (self.state_dir / "catalogue.journal").exists():
            cat_journal, cat_state, cat_records = Journal.open("catalogue", self.state_dir / "catalogue.journal", snapshot_every)
            self.broker_journal, _, br_records = Journal.open("broker", self.state_dir / "broker.journal")
            self._load_storage()
        else:
            cat_journal = Journal("catalogue", self._path("catalogue.journal"), snapshot_every)
            self.broker_journal = Journal("broker", self._path("broker.journal"))

        cat_kw = dict(se_exists=self.storage.__contains__, clock=self.clock, seed=seed, vo=config.name)
        if cat_records is None:
            self.catalogue = Catalogue(journal=cat_journal, **cat_kw)
            self._bootstrap_homes()
        else:
            self.catalogue = Catalogue.restore(cat_state, cat_records, journal=cat_journal, **cat_kw)
        if br_records is None:
            self.broker = Broker(self.catalogue, config, self.storage, self.clock, self.broker_journal, self.log)
        else:
            self.broker = Broker.restore(self.catalogue, config, br_records, journal=self.broker_journal,
                                         storage=self.storage, clock=self.clock, log=self.log)
        self.policy = None if config.policies.empty else PolicyMonitor(config.policies, self.roles_of)
        self._wire()

    def _path(self, name: str):
        return None if self.state_dir is None else self.state_dir / name

    def _wire(self):
        self.broker.policy = self.policy
        self.broker.listeners = [lambda kind, subj, detail: [fn(kind, subj, detail) for fn in self.listeners]]

    def roles_of(self, user: str) -> tuple:
        spec = self.config.users.get(user)
        return spec.roles if spec else ()

    def _bootstrap_homes(self):
        for user in sorted(self.config.users):
            home = self.config.home(user)
            if not self.catalogue.exists(home):
                self.catalogue.mkdir(home, ADMIN, owner=user, parents=True)

    # ------------------------------------------------------------------ access

    def login(self, user: str, ttl: float | None = None) -> Principal:
        return self.tokens.authenticate(user, ttl)

    def principal(self, user: str) -> Principal:
        """Non-expiring credential for ``user`` (services acting on their behalf)."""
        return ADMIN if user == "admin" else self.broker.principal_for(user)

    def site_of_se(self, se: str) -> str:
        return self.storage[se].site

    def register_data(self, lfn: str, se: str, size: int | None = None, owner: str = "admin",
                      seed: str | None = None, payload: bytes | None = None, path: str | None = None, parents: bool = True):
        """Store content on ``se`` and catalogue it as ``owner``."""
        blob = Blob.of(payload) if payload is not None else Blob(int(size or 0), seed if seed is not None else lfn)
        phys = path or lfn
        self.storage[se].store(phys, blob)
        who = self.principal(owner)
        parent = lfn.rsplit("/", 1)[0] or "/"
        if parents and not self.catalogue.exists(parent):
            self.catalogue.mkdir(parent, ADMIN if owner == "admin" else who, parents=True, owner=owner)
        return self.catalogue.register_file(lfn, PhysicalLocation(se, self.storage[se].protocol, phys), blob.size, who)

    def add_storage(self, se: StorageElement):
        if se.name in self.storage:
            raise NameClash(f"storage element {se.name} already exists in {self.config.name}")
        self.storage[se.name] = se

    def fetch(self, lfn: str, principal: Principal = ADMIN) -> Blob:
        """Content of ``lfn`` from its first readable replica."""
        entry = self.catalogue.lookup(lfn, principal)
        last = None
        for rep in sorted(entry.replicas, key=lambda r: r.se_name):
            se = self.storage.get(rep.se_name)
            if se is None:
                continue
            try:
                return se.fetch(rep.path)
            except Exception as exc:  # noqa: BLE001 - try the next replica
                last = exc
        raise last or NotFound(f"{lfn} has no readable replica")

    def delete(self, lfn: str, principal: Principal, recursive: bool = False):
        """Remove a catalogue entry together with the stored copies of a file."""
        entry = self.catalogue.lookup(lfn, principal, follow=False)
        if entry.is_dir and recursive:
            for child in self.catalogue.listdir(lfn, principal):
                self.delete(posixpath.join(lfn, child.name), principal, True)
        elif entry.kind == "file":
            for rep in entry.replicas:
                self.catalogue.remove_replica(lfn, rep.se_name, principal)
                se = self.storage.get(rep.se_name)
                if se is not None and se.has(rep.path):
                    se.delete(rep.path)
        self.catalogue.remove(lfn, principal)

    # ------------------------------------------------------------------ broker lifecycle

    def crash_broker(self):
        self.broker_up = False

    def restart_broker(self):
        self.broker = Broker.restore(self.catalogue, self.config, list(self.broker_journal.records),
                                     journal=self.broker_journal, storage=self.storage, clock=self.clock, log=self.log)
        self._wire()
        self.broker_up = True
        return self.broker

    # ------------------------------------------------------------------ persistence (shell)

    def save(self):
        """Flush SE content so a later process can reopen this grid from ``state_dir``."""
        if self.state_dir is None:
            return
        doc = {}
        for name, se in sorted(self.storage.items()):
            items = []
            for cls, area in (("permanent", se.permanent), ("cache", se.cache)):
                for path, (blob, _) in area.items():
                    items.append({
                        "path": path, "class": cls, "size": blob.size, "seed": blob.seed,
                        "payload": None if blob.payload is None else base64.b64encode(blob.payload).decode(),
                    })
            doc[name] = items
        (self.state_dir / "storage.json").write_text(json.dumps(doc, sort_keys=True))
        self.catalogue.journal.close()
        self.broker_journal.close()

    def _load_storage(self):
        p = self.state_dir / "storage.json"
        if not p.exists():
            return
        for name, items in json.loads(p.read_text()).items():
            se = self.storage.get(name)
            if se is None:
                continue
            for it in items:
                payload = None if it["payload"] is None else base64.b64decode(it["payload"])
                blob = Blob(it["size"], it["seed"], payload)
                se.store(it["path"], blob, it["class"])


def ensure_dir(grid: Grid, path: str, owner: str):
    try:
        grid.catalogue.mkdir(path, ADMIN, owner=owner, parents=True)
    except AlreadyExists:
        pass
