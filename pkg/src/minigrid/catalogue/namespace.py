"""Logical file namespace: directories, files, symlinks and /proc job directories.

Every directory owns a *table* (its children) and any number of tag tables;
both live in one :class:`DirectoryShard`.  A routing map sends each directory
path to its shard, so moving a subtree between shards only rehomes tables and
never changes what a path resolves to.

All mutations are event-sourced through a :class:`~minigrid.journal.Journal`:
public methods validate, then commit a JSON record that ``_apply`` executes.
Replaying the same records reproduces the same state.
"""

from __future__ import annotations

import hashlib
import posixpath
import threading
import uuid
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..auth import ADMIN, Principal
from ..errors import (
    AlreadyExists,
    BadSchema,
    Duplicate,
    NoSuchTag,
    NotADirectory,
    NotEmpty,
    NotFound,
    PermissionDenied,
    SymlinkLoop,
    TypeMismatch,
    UnknownJob,
    UnknownSE,
)
from ..journal import Journal
from .query import LfnQuery, parse_query

MAX_SYMLINK_DEPTH = 16
DEFAULT_SHARD = "shard0"

FILE, DIRECTORY, SYMLINK, PROC = "file", "directory", "symlink", "proc"
DIR_KINDS = (DIRECTORY, PROC)

_MODE_BITS = {"r": 4, "w": 2, "x": 1}
TAG_TYPES = {"int": int, "float": float, "string": str}


@dataclass(frozen=True)
class PhysicalLocation:
    se_name: str
    protocol: str
    path: str

    def __str__(self):
        return f"{self.se_name} {self.protocol} {self.path}"


@dataclass
class CatalogueEntry:
    file_id: uuid.UUID
    name: str
    kind: str
    owner: str
    group: str
    perms: int
    size: int = 0
    replicas: list = field(default_factory=list)
    link_target: str | None = None

    @property
    def is_dir(self) -> bool:
        return self.kind in DIR_KINDS

    def copy(self) -> "CatalogueEntry":
        return CatalogueEntry(
            self.file_id, self.name, self.kind, self.owner, self.group, self.perms,
            self.size, list(self.replicas), self.link_target,
        )

    def to_dict(self) -> dict:
        d = {
            "file_id": self.file_id.hex,
            "name": self.name,
            "kind": self.kind,
            "owner": self.owner,
            "group": self.group,
            "perms": self.perms,
        }
        if self.kind == FILE:
            d["size"] = self.size
            d["replicas"] = [[r.se_name, r.protocol, r.path] for r in self.replicas]
        if self.kind == SYMLINK:
            d["link_target"] = self.link_target
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CatalogueEntry":
        return cls(
            uuid.UUID(hex=d["file_id"]), d["name"], d["kind"], d["owner"], d["group"], d["perms"],
            d.get("size", 0), [PhysicalLocation(*r) for r in d.get("replicas", [])], d.get("link_target"),
        )


@dataclass
class TagTable:
    tag_name: str
    schema: list  # [(attr, type_name)]
    rows: dict = field(default_factory=dict)  # entry name -> {attr: value}

    def coerce(self, values: dict) -> dict:
        types = dict(self.schema)
        out = {}
        for k, v in values.items():
            if k not in types:
                raise TypeMismatch(f"{self.tag_name} has no attribute {k!r}")
            want = types[k]
            if want == "string":
                if not isinstance(v, str):
                    raise TypeMismatch(f"{k} expects string, got {v!r}")
            elif want == "int":
                if isinstance(v, bool) or not isinstance(v, int):
                    raise TypeMismatch(f"{k} expects int, got {v!r}")
            elif isinstance(v, bool) or not isinstance(v, (int, float)):
                raise TypeMismatch(f"{k} expects float, got {v!r}")
            else:
                v = float(v)
            out[k] = v
        return out


@dataclass
class DirectoryShard:
    shard_id: str
    tables: dict = field(default_factory=dict)  # dir path -> {name: CatalogueEntry}
    tag_tables: dict = field(default_factory=dict)  # dir path -> {tag: TagTable}


def normpath(path: str, cwd: str = "/") -> str:
    if not path:
        raise NotFound("empty path")
    if not path.startswith("/"):
        path = posixpath.join(cwd, path)
    p = posixpath.normpath(path)
    if p.startswith("//"):
        p = "/" + p.lstrip("/")
    return p


def split(path: str) -> list[str]:
    return [p for p in path.split("/") if p]


def allowed(entry: CatalogueEntry, principal: Principal, mode: str) -> bool:
    """Unix triplet evaluation; the admin role bypasses all checks."""
    if principal.is_admin:
        return True
    bit = _MODE_BITS[mode]
    if principal.user == entry.owner:
        shift = 6
    elif entry.group in principal.groups:
        shift = 3
    else:
        shift = 0
    return bool((entry.perms >> shift) & bit)


class Catalogue:
    """In-process file and metadata catalogue for one VO."""

    def __init__(
        self,
        se_exists: Callable[[str], bool] | None = None,
        clock: Callable[[], float] | None = None,
        seed: int = 0,
        vo: str = "",
        journal: Journal | None = None,
        job_exists: Callable[[int], str | None] | None = None,
        _bootstrap: bool = True,
    ):
        self.se_exists = se_exists or (lambda name: True)
        self.clock = clock or (lambda: 0.0)
        self.job_owner = job_exists
        self.seed = seed
        self.vo = vo
        self.journal = journal if journal is not None else Journal("catalogue")
        self._lock = threading.RLock()
        self._id_counter = 0
        self._ids: set = set()
        self.shards: dict[str, DirectoryShard] = {DEFAULT_SHARD: DirectoryShard(DEFAULT_SHARD)}
        self.dir_shard: dict[str, str] = {}
        self.root = None
        if _bootstrap:
            fid = self._new_id()
            self._commit({"op": "init", "file_id": fid.hex, "id_seq": self._id_counter, "shard": DEFAULT_SHARD})
            self.mkdir("/proc", ADMIN, perms=0o755)

    # ------------------------------------------------------------------ plumbing

    def _new_id(self) -> uuid.UUID:
        while True:
            self._id_counter += 1
            digest = hashlib.sha256(f"{self.seed}:{self._id_counter}".encode()).digest()
            fid = uuid.UUID(bytes=digest[:16])
            if fid not in self._ids:
                return fid

    def _commit(self, record: dict):
        self.journal.append(record)
        self._apply(record)
        if self.journal.due_for_snapshot():
            self.journal.write_snapshot(self.snapshot())

    def _auth(self, principal: Principal):
        principal.check(self.clock())

    def _table(self, dirpath: str) -> dict:
        return self.shards[self.dir_shard[dirpath]].tables[dirpath]

    def _tags(self, dirpath: str) -> dict:
        return self.shards[self.dir_shard[dirpath]].tag_tables[dirpath]

    def _resolve(self, path: str, principal: Principal, follow: bool = True):
        """Walk ``path``; returns (parent dir path, entry, canonical path).

        Needs search (x) on every directory walked through.  Symlinks in the
        middle of a path are always followed, the last one only if ``follow``.
        """
        parts = split(path)
        if not parts:
            return None, self.root, "/"
        links = 0
        i = 0
        cur_path, cur = "/", self.root
        while True:
            if not cur.is_dir:
                raise NotADirectory(cur_path)
            if not allowed(cur, principal, "x"):
                raise PermissionDenied(f"search permission denied on {cur_path}")
            child = self._table(cur_path).get(parts[i])
            child_path = posixpath.join(cur_path, parts[i])
            if child is None:
                raise NotFound(child_path)
            last = i == len(parts) - 1
            if child.kind == SYMLINK and (follow or not last):
                links += 1
                if links > MAX_SYMLINK_DEPTH:
                    raise SymlinkLoop(path)
                target = normpath(child.link_target, cur_path)
                parts = split(target) + parts[i + 1 :]
                i = 0
                cur_path, cur = "/", self.root
                if not parts:
                    return None, self.root, "/"
                continue
            if last:
                return cur_path, child, child_path
            cur_path, cur = child_path, child
            i += 1

    def _parent_for_create(self, path: str, principal: Principal):
        path = normpath(path)
        if path == "/":
            raise AlreadyExists("/")
        parent_path, name = posixpath.split(path)
        _, parent, parent_path = self._resolve(parent_path, principal)
        if not parent.is_dir:
            raise NotADirectory(parent_path)
        if not (allowed(parent, principal, "w") and allowed(parent, principal, "x")):
            raise PermissionDenied(f"write permission denied on {parent_path}")
        target = posixpath.join(parent_path, name)
        if name in self._table(parent_path):
            raise AlreadyExists(target)
        return parent_path, parent, name, target

    def _primary_group(self, principal: Principal) -> str:
        return principal.groups[0] if principal.groups else principal.user

    # ------------------------------------------------------------------ apply

    def _apply(self, r: dict):
        op = r["op"]
        fid = r.get("file_id")
        if fid is not None:
            self._ids.add(uuid.UUID(hex=fid))
            self._id_counter = max(self._id_counter, r.get("id_seq", self._id_counter))
        getattr(self, "_apply_" + op)(r)

    def _apply_init(self, r):
        self.root = CatalogueEntry(uuid.UUID(hex=r["file_id"]), "", DIRECTORY, "admin", "admin", 0o755)
        self.shards.setdefault(r["shard"], DirectoryShard(r["shard"]))
        self._home_dir("/", r["shard"])

    def _home_dir(self, path: str, shard_id: str):
        shard = self.shards.setdefault(shard_id, DirectoryShard(shard_id))
        self.dir_shard[path] = shard_id
        shard.tables[path] = {}
        shard.tag_tables[path] = {}

    def _new_entry(self, r, kind) -> CatalogueEntry:
        parent, name = posixpath.split(r["path"])
        e = CatalogueEntry(uuid.UUID(hex=r["file_id"]), name, kind, r["owner"], r["group"], r["perms"])
        self._table(parent)[name] = e
        return e

    def _apply_mkdir(self, r):
        self._new_entry(r, r.get("kind", DIRECTORY))
        self._home_dir(r["path"], r["shard"])

    def _apply_register(self, r):
        e = self._new_entry(r, FILE)
        e.size = r["size"]
        e.replicas = [PhysicalLocation(*r["replica"])]

    def _apply_symlink(self, r):
        e = self._new_entry(r, SYMLINK)
        e.link_target = r["target"]

    def _entry_at(self, path) -> CatalogueEntry:
        parent, name = posixpath.split(path)
        return self._table(parent)[name]

    def _apply_add_replica(self, r):
        self._entry_at(r["path"]).replicas.append(PhysicalLocation(*r["replica"]))

    def _apply_remove_replica(self, r):
        e = self._entry_at(r["path"])
        loc = PhysicalLocation(*r["replica"])
        e.replicas = [x for x in e.replicas if x != loc]

    def _apply_chmod(self, r):
        self._entry_at(r["path"]).perms = r["perms"]

    def _apply_remove(self, r):
        parent, name = posixpath.split(r["path"])
        e = self._table(parent).pop(name)
        for table in self._tags(parent).values():
            table.rows.pop(name, None)
        if e.is_dir:
            sid = self.dir_shard.pop(r["path"])
            self.shards[sid].tables.pop(r["path"])
            self.shards[sid].tag_tables.pop(r["path"])

    def _apply_rename(self, r):
        src, dst = r["src"], r["dst"]
        sp, sn = posixpath.split(src)
        dp, dn = posixpath.split(dst)
        e = self._table(sp).pop(sn)
        e.name = dn
        self._table(dp)[dn] = e
        src_tags = self._tags(sp)
        for tag, table in src_tags.items():
            row = table.rows.pop(sn, None)
            if row is not None and sp == dp:
                table.rows[dn] = row
        if e.is_dir:
            prefix = src + "/"
            moved = [p for p in self.dir_shard if p == src or p.startswith(prefix)]
            for old in moved:
                new = dst + old[len(src) :]
                sid = self.dir_shard.pop(old)
                shard = self.shards[sid]
                shard.tables[new] = shard.tables.pop(old)
                shard.tag_tables[new] = shard.tag_tables.pop(old)
                self.dir_shard[new] = sid

    def _apply_define_tag(self, r):
        self._tags(r["dir"])[r["tag"]] = TagTable(r["tag"], [tuple(x) for x in r["schema"]])

    def _apply_set_tag(self, r):
        parent, name = posixpath.split(r["path"])
        row = self._tags(parent)[r["tag"]].rows.setdefault(name, {})
        row.update(r["values"])

    def _apply_move_shard(self, r):
        d, new = r["dir"], r["shard"]
        target = self.shards.setdefault(new, DirectoryShard(new))
        prefix = "/" if d == "/" else d + "/"
        for p in [p for p in self.dir_shard if p == d or p.startswith(prefix)]:
            old = self.dir_shard[p]
            if old == new:
                continue
            src = self.shards[old]
            target.tables[p] = src.tables.pop(p)
            target.tag_tables[p] = src.tag_tables.pop(p)
            self.dir_shard[p] = new

    # ------------------------------------------------------------------ namespace ops

    def mkdir(
        self,
        path: str,
        principal: Principal,
        shard_hint: str | None = None,
        perms: int = 0o755,
        owner: str | None = None,
        parents: bool = False,
        kind: str = DIRECTORY,
    ) -> CatalogueEntry:
        with self._lock:
            self._auth(principal)
            path = normpath(path)
            if parents:
                cur = "/"
                for part in split(path)[:-1]:
                    cur = posixpath.join(cur, part)
                    try:
                        self._resolve(cur, principal)
                    except NotFound:
                        self.mkdir(cur, principal, shard_hint, perms, owner)
                if path != "/" and self.exists(path):
                    raise AlreadyExists(path)
            parent_path, parent, name, target = self._parent_for_create(path, principal)
            shard = shard_hint or self.dir_shard[parent_path]
            fid = self._new_id()
            self._commit(
                {
                    "op": "mkdir",
                    "path": target,
                    "kind": kind,
                    "owner": owner or principal.user,
                    "group": self._primary_group(principal) if owner is None else owner,
                    "perms": perms,
                    "file_id": fid.hex,
                    "id_seq": self._id_counter,
                    "shard": shard,
                }
            )
            return self._entry_at(target).copy()

    def register_file(
        self,
        lfn: str,
        location: PhysicalLocation,
        size: int,
        principal: Principal,
        perms: int = 0o644,
    ) -> uuid.UUID:
        with self._lock:
            self._auth(principal)
            if not self.se_exists(location.se_name):
                raise UnknownSE(location.se_name)
            parent_path, parent, name, target = self._parent_for_create(lfn, principal)
            fid = self._new_id()
            self._commit(
                {
                    "op": "register",
                    "path": target,
                    "owner": principal.user,
                    "group": self._primary_group(principal),
                    "perms": perms,
                    "size": int(size),
                    "replica": [location.se_name, location.protocol, location.path],
                    "file_id": fid.hex,
                    "id_seq": self._id_counter,
                }
            )
            return fid

    def symlink(self, link: str, target: str, principal: Principal) -> CatalogueEntry:
        with self._lock:
            self._auth(principal)
            _, _, _, path = self._parent_for_create(link, principal)
            fid = self._new_id()
            self._commit(
                {
                    "op": "symlink",
                    "path": path,
                    "target": target,
                    "owner": principal.user,
                    "group": self._primary_group(principal),
                    "perms": 0o777,
                    "file_id": fid.hex,
                    "id_seq": self._id_counter,
                }
            )
            return self._entry_at(path).copy()

    def _writable_file(self, lfn: str, principal: Principal):
        parent_path, e, path = self._resolve(normpath(lfn), principal)
        if e.kind != FILE:
            raise NotFound(f"{path} is not a file")
        if not allowed(e, principal, "w"):
            raise PermissionDenied(f"write permission denied on {path}")
        return parent_path, e, path

    def add_replica(self, lfn: str, location: PhysicalLocation, principal: Principal) -> CatalogueEntry:
        with self._lock:
            self._auth(principal)
            _, e, path = self._writable_file(lfn, principal)
            if any(r.se_name == location.se_name and r.path == location.path for r in e.replicas):
                raise Duplicate(f"{path} already has a replica at {location.se_name}:{location.path}")
            if not self.se_exists(location.se_name):
                raise UnknownSE(location.se_name)
            self._commit({"op": "add_replica", "path": path, "replica": [location.se_name, location.protocol, location.path]})
            return e.copy()

    def remove_replica(self, lfn: str, se_name: str, principal: Principal) -> CatalogueEntry:
        with self._lock:
            self._auth(principal)
            _, e, path = self._writable_file(lfn, principal)
            hits = [r for r in e.replicas if r.se_name == se_name]
            if not hits:
                raise NotFound(f"{path} has no replica at {se_name}")
            for loc in hits:
                self._commit({"op": "remove_replica", "path": path, "replica": [loc.se_name, loc.protocol, loc.path]})
            return e.copy()

    def lookup(self, lfn: str, principal: Principal, follow: bool = True) -> CatalogueEntry:
        with self._lock:
            self._auth(principal)
            return self._resolve(normpath(lfn), principal, follow)[1].copy()

    def realpath(self, lfn: str, principal: Principal) -> str:
        with self._lock:
            self._auth(principal)
            return self._resolve(normpath(lfn), principal)[2]

    def exists(self, lfn: str, principal: Principal = ADMIN) -> bool:
        try:
            self.lookup(lfn, principal)
        except (NotFound, NotADirectory, SymlinkLoop):
            return False
        return True

    def listdir(self, lfn: str, principal: Principal) -> list[CatalogueEntry]:
        with self._lock:
            self._auth(principal)
            _, e, path = self._resolve(normpath(lfn), principal)
            if not e.is_dir:
                return [e.copy()]
            if not allowed(e, principal, "r"):
                raise PermissionDenied(f"read permission denied on {path}")
            table = self._table(path)
            return [table[n].copy() for n in sorted(table)]

    def check_access(self, lfn: str, principal: Principal, mode: str) -> bool:
        with self._lock:
            e = self._resolve(normpath(lfn), ADMIN)[1]
            return allowed(e, principal, mode)

    def chmod(self, lfn: str, perms: int, principal: Principal):
        with self._lock:
            self._auth(principal)
            _, e, path = self._resolve(normpath(lfn), principal, follow=False)
            if not (principal.is_admin or principal.user == e.owner):
                raise PermissionDenied(f"only the owner may chmod {path}")
            self._commit({"op": "chmod", "path": path, "perms": int(perms)})

    def remove(self, lfn: str, principal: Principal):
        """Delete an entry: files need zero replicas unless admin, dirs must be empty."""
        with self._lock:
            self._auth(principal)
            path = normpath(lfn)
            parent_path, e, path = self._resolve(path, principal, follow=False)
            if parent_path is None:
                raise PermissionDenied("cannot remove /")
            parent = self._resolve(parent_path, principal)[1]
            if not (allowed(parent, principal, "w") and allowed(parent, principal, "x")):
                raise PermissionDenied(f"write permission denied on {parent_path}")
            if e.kind == FILE and e.replicas and not principal.is_admin:
                raise PermissionDenied(f"{path} still has {len(e.replicas)} replica(s)")
            if e.is_dir and self._table(path):
                raise NotEmpty(path)
            self._commit({"op": "remove", "path": path})

    def rename(self, src: str, dst: str, principal: Principal):
        with self._lock:
            self._auth(principal)
            src_parent, e, src_path = self._resolve(normpath(src), principal, follow=False)
            if src_parent is None:
                raise PermissionDenied("cannot rename /")
            sp = self._resolve(src_parent, principal)[1]
            if not (allowed(sp, principal, "w") and allowed(sp, principal, "x")):
                raise PermissionDenied(f"write permission denied on {src_parent}")
            dst_parent, _, _, dst_path = self._parent_for_create(dst, principal)
            if e.is_dir and (dst_path + "/").startswith(src_path + "/"):
                raise PermissionDenied(f"cannot move {src_path} into itself")
            self._commit({"op": "rename", "src": src_path, "dst": dst_path})

    def create_proc_dir(self, job_id: int, owner: str | None = None) -> str:
        """``/proc/<id>`` for a submitted job, owned by its submitter."""
        with self._lock:
            if owner is None:
                owner = self.job_owner(job_id) if self.job_owner else None
            if owner is None:
                raise UnknownJob(str(job_id))
            path = f"/proc/{job_id}"
            self.mkdir(path, ADMIN, perms=0o755, owner=owner, kind=PROC)
            return path

    # ------------------------------------------------------------------ metadata

    def define_tag(self, dirpath: str, tag_name: str, schema, principal: Principal):
        with self._lock:
            self._auth(principal)
            schema = [tuple(x) for x in (schema.items() if isinstance(schema, dict) else schema)]
            names = [a for a, _ in schema]
            if not schema or len(set(names)) != len(names):
                raise BadSchema(f"schema for {tag_name} is empty or repeats an attribute")
            for a, t in schema:
                if t not in TAG_TYPES or not a:
                    raise BadSchema(f"bad attribute {a}:{t}")
            _, d, path = self._resolve(normpath(dirpath), principal)
            if not d.is_dir:
                raise NotADirectory(path)
            if not allowed(d, principal, "w"):
                raise PermissionDenied(f"write permission denied on {path}")
            if tag_name in self._tags(path):
                raise AlreadyExists(f"tag {tag_name} on {path}")
            self._commit({"op": "define_tag", "dir": path, "tag": tag_name, "schema": [list(x) for x in schema]})

    def set_tag_values(self, lfn: str, tag_name: str, values: dict, principal: Principal):
        with self._lock:
            self._auth(principal)
            parent, e, path = self._resolve(normpath(lfn), principal, follow=False)
            if parent is None:
                raise NotFound("/ has no tag rows")
            table = self._tags(parent).get(tag_name)
            if table is None:
                raise NoSuchTag(f"{parent} has no tag {tag_name}")
            if not allowed(e, principal, "w"):
                raise PermissionDenied(f"write permission denied on {path}")
            clean = table.coerce(values)
            self._commit({"op": "set_tag", "path": path, "tag": tag_name, "values": clean})

    def tag_schema(self, dirpath: str, principal: Principal) -> dict:
        with self._lock:
            _, d, path = self._resolve(normpath(dirpath), principal)
            return {t: list(tt.schema) for t, tt in self._tags(path).items()}

    def tag_values(self, lfn: str, tag_name: str, principal: Principal) -> dict | None:
        with self._lock:
            parent, e, path = self._resolve(normpath(lfn), principal, follow=False)
            table = self._tags(parent).get(tag_name)
            if table is None:
                raise NoSuchTag(f"{parent} has no tag {tag_name}")
            row = table.rows.get(e.name)
            return None if row is None else dict(row)

    def find(self, query: LfnQuery | str, principal: Principal) -> list[str]:
        with self._lock:
            self._auth(principal)
            q = parse_query(query) if isinstance(query, str) else query
            regs = q.regexes
            out: list[str] = []
            if not regs:
                return out

            def walk(dirpath: str, entry: CatalogueEntry, depth: int):
                if not (allowed(entry, principal, "x") and allowed(entry, principal, "r")):
                    return
                table = self._table(dirpath)
                last = depth == len(regs) - 1
                rx = regs[depth]
                tags = self._tags(dirpath).get(q.tag) if q.tag else None
                if last and q.tag and tags is None:
                    return
                for name in sorted(table):
                    if rx.fullmatch(name) is None:
                        continue
                    child = table[name]
                    child_path = dirpath + name if dirpath == "/" else dirpath + "/" + name
                    if last:
                        if child.kind != FILE or not allowed(child, principal, "r"):
                            continue
                        if q.tag:
                            row = tags.rows.get(name)
                            if row is None or (q.predicate is not None and not q.predicate.test(row)):
                                continue
                        out.append(child_path)
                    elif child.is_dir:
                        walk(child_path, child, depth + 1)

            walk("/", self.root, 0)
            out.sort()
            return out

    # ------------------------------------------------------------------ shards

    def move_subtree_to_shard(self, dirpath: str, new_shard: str, principal: Principal):
        with self._lock:
            self._auth(principal)
            if not principal.is_admin:
                raise PermissionDenied("moving shards requires the admin role")
            _, d, path = self._resolve(normpath(dirpath), principal)
            if not d.is_dir:
                raise NotADirectory(path)
            self._commit({"op": "move_shard", "dir": path, "shard": new_shard})

    def shard_of(self, dirpath: str) -> str:
        return self.dir_shard[normpath(dirpath)]

    # ------------------------------------------------------------------ inspection

    def walk(self) -> Iterable[tuple[str, CatalogueEntry]]:
        """Every (path, entry) pair, depth-first in name order; no permission checks."""
        with self._lock:
            stack = [("/", self.root)]
            yield "/", self.root.copy()
            while stack:
                dirpath, _ = stack.pop()
                table = self._table(dirpath)
                kids = []
                for name in sorted(table):
                    e = table[name]
                    p = dirpath + name if dirpath == "/" else dirpath + "/" + name
                    yield p, e.copy()
                    if e.is_dir:
                        kids.append((p, e))
                stack.extend(reversed(kids))

    def tag_row(self, path: str, tag: str) -> dict | None:
        parent, name = posixpath.split(path)
        table = self._tags(parent).get(tag) if parent in self.dir_shard else None
        if table is None:
            return None
        row = table.rows.get(name)
        return None if row is None else dict(row)

    def has_tag(self, dirpath: str, tag: str) -> bool:
        return dirpath in self.dir_shard and tag in self._tags(dirpath)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "root": self.root.to_dict(),
                "id_counter": self._id_counter,
                "dir_shard": dict(sorted(self.dir_shard.items())),
                "shards": {
                    sid: {
                        "tables": {d: {n: e.to_dict() for n, e in sorted(t.items())} for d, t in sorted(s.tables.items())},
                        "tags": {
                            d: {
                                tag: {"schema": [list(x) for x in tt.schema], "rows": dict(sorted(tt.rows.items()))}
                                for tag, tt in sorted(tags.items())
                            }
                            for d, tags in sorted(s.tag_tables.items())
                        },
                    }
                    for sid, s in sorted(self.shards.items())
                },
            }

    def logical_view(self) -> dict:
        """Shard-independent view: path -> entry dict plus tag tables per dir."""
        with self._lock:
            entries = {p: e.to_dict() for p, e in self.walk()}
            tags = {}
            for d in sorted(self.dir_shard):
                for tag, tt in sorted(self._tags(d).items()):
                    tags[f"{d}?{tag}"] = {"schema": [list(x) for x in tt.schema], "rows": dict(sorted(tt.rows.items()))}
            return {"entries": entries, "tags": tags}

    @classmethod
    def restore(cls, state: dict | None, records: list[dict], journal: Journal | None = None, **kw) -> "Catalogue":
        """Rebuild from an optional snapshot plus journal records."""
        cat = cls(journal=journal, _bootstrap=False, **kw)
        if state is not None:
            cat.root = CatalogueEntry.from_dict(state["root"])
            cat._id_counter = state["id_counter"]
            cat.dir_shard = dict(state["dir_shard"])
            cat.shards = {}
            for sid, s in state["shards"].items():
                shard = DirectoryShard(sid)
                for d, t in s["tables"].items():
                    shard.tables[d] = {n: CatalogueEntry.from_dict(e) for n, e in t.items()}
                    for e in shard.tables[d].values():
                        cat._ids.add(e.file_id)
                for d, tags in s["tags"].items():
                    shard.tag_tables[d] = {
                        tag: TagTable(tag, [tuple(x) for x in tt["schema"]], {k: dict(v) for k, v in tt["rows"].items()})
                        for tag, tt in tags.items()
                    }
                cat.shards[sid] = shard
            cat._ids.add(cat.root.file_id)
        for r in records:
            cat._apply(r)
        return cat
