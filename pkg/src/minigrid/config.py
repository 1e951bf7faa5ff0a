"""VO configuration: users, groups, roles, sites, CEs, SEs, packages, commands.

Loaded once from YAML and kept as a read-only cache.  The schema is documented
in ``docs/vo-config.md``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, CycleDetected


def version_key(v: str) -> tuple:
    """Dotted numeric versions compare component-wise: 3.10 > 3.9."""
    out = []
    for part in str(v).split("."):
        try:
            out.append((0, int(part), ""))
        except ValueError:
            out.append((1, 0, part))
    return tuple(out)


def split_ref(ref: str) -> tuple[str, str | None]:
    """``"AliRoot::3.05"`` -> ("AliRoot", "3.05"); bare names mean any version."""
    name, sep, version = ref.partition("::")
    return name, (version or None) if sep else None


@dataclass(frozen=True)
class UserSpec:
    name: str
    groups: tuple = ()
    roles: tuple = ()
    home: str | None = None


@dataclass(frozen=True)
class SiteSpec:
    name: str
    private: bool = False


@dataclass(frozen=True)
class CESpec:
    name: str
    site: str
    max_slots: int
    close_se: tuple = ()
    platform: str = "linux"
    partition: str = "default"
    requirements: str | None = None


@dataclass(frozen=True)
class SESpec:
    name: str
    site: str
    capacity: int
    protocol: str = "sim"


@dataclass(frozen=True)
class PackageSpec:
    name: str
    version: str
    depends: tuple = ()  # ((name, version or None), ...)
    setup: tuple = ()  # environment mutations recorded on install
    lfn: str | None = None

    @property
    def ref(self) -> str:
        return f"{self.name}::{self.version}"


@dataclass(frozen=True)
class ExecProfile:
    """Deterministic stand-in for running a command."""

    kind: str = "produce"  # produce | analysis | records
    duration: float = 60.0
    jitter: float = 0.0
    outputs: tuple = ()  # ((name, size), ...)
    failure_rate: float = 0.0
    seed: str = ""
    nbins: int = 10
    lo: float = 0.0
    hi: float = 1.0
    samples_per_file: int = 16


@dataclass(frozen=True)
class CommandSpec:
    name: str
    version: str = "1"
    depends: tuple = ()  # package refs
    validation: str | None = None  # None or "outputs_nonzero"
    profile: ExecProfile = field(default_factory=ExecProfile)


@dataclass(frozen=True)
class PolicyRules:
    role_boost: tuple = ()  # ((role, boost), ...)
    user_caps: tuple = ()  # ((user, cap), ...)

    @property
    def empty(self) -> bool:
        return not self.role_boost and not self.user_caps


@dataclass
class VOConfig:
    name: str = "vo"
    users: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    roles: tuple = ()
    sites: dict = field(default_factory=dict)
    computing_elements: dict = field(default_factory=dict)
    storage_elements: dict = field(default_factory=dict)
    packages: dict = field(default_factory=dict)  # (name, version) -> PackageSpec
    commands: dict = field(default_factory=dict)
    grid_partitions: dict = field(default_factory=dict)
    policies: PolicyRules = field(default_factory=PolicyRules)
    source: str | None = None

    def versions(self, name: str) -> list[str]:
        return sorted((v for (n, v) in self.packages if n == name), key=version_key)

    def package_exists(self, ref: str) -> bool:
        name, version = split_ref(ref)
        return bool(self.versions(name)) if version is None else (name, version) in self.packages

    def token_users(self) -> dict:
        return {u.name: (u.groups, u.roles) for u in self.users.values()}

    def home(self, user: str) -> str:
        u = self.users.get(user)
        return (u.home if u and u.home else f"/{user}")


def _tuple(x):
    if x is None:
        return ()
    if isinstance(x, (list, tuple)):
        return tuple(x)
    return (x,)


def _named(section, key: str):
    """Accept either ``{name: {...}}`` or ``[{name: ..., ...}]``."""
    if section is None:
        return []
    if isinstance(section, dict):
        return [dict(v or {}, **{key: k}) for k, v in section.items()]
    if isinstance(section, list):
        return [dict(v) for v in section]
    raise ConfigError(f"section must be a mapping or list, got {type(section).__name__}")


def _profile(d: dict | None) -> ExecProfile:
    d = dict(d or {})
    outputs = d.pop("outputs", [])
    outs = []
    for o in outputs:
        if isinstance(o, str):
            outs.append((o, 1))
        else:
            outs.append((o["name"], int(float(o.get("size", 1)))))
    known = set(ExecProfile.__dataclass_fields__)
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown profile keys {sorted(bad)}")
    if "seed" in d:
        d["seed"] = str(d["seed"])
    return ExecProfile(outputs=tuple(outs), **d)


def from_dict(doc: dict, source: str | None = None) -> VOConfig:
    if not isinstance(doc, dict):
        raise ConfigError("VO config must be a mapping")
    cfg = VOConfig(name=str(doc.get("vo", doc.get("name", "vo"))), source=source)
    for u in _named(doc.get("users"), "name"):
        cfg.users[u["name"]] = UserSpec(u["name"], _tuple(u.get("groups")), _tuple(u.get("roles")), u.get("home"))
    groups = doc.get("groups") or {}
    cfg.groups = {g: {} for g in groups} if isinstance(groups, list) else dict(groups)
    cfg.roles = _tuple(doc.get("roles"))
    for s in _named(doc.get("sites"), "name"):
        cfg.sites[s["name"]] = SiteSpec(s["name"], bool(s.get("private", False)))
    for se in _named(doc.get("storage_elements"), "name"):
        cfg.storage_elements[se["name"]] = SESpec(
            se["name"], se.get("site", se["name"]), int(float(se.get("capacity", 10**12))), se.get("protocol", "sim")
        )
    for ce in _named(doc.get("computing_elements"), "name"):
        cfg.computing_elements[ce["name"]] = CESpec(
            ce["name"],
            ce.get("site", ce["name"]),
            int(ce.get("max_slots", ce.get("slots", 1))),
            _tuple(ce.get("close_se")),
            ce.get("platform", "linux"),
            ce.get("partition", "default"),
            ce.get("requirements"),
        )
    for p in doc.get("packages") or []:
        deps = []
        for d in p.get("depends") or []:
            deps.append(split_ref(d))
        spec = PackageSpec(p["name"], str(p["version"]), tuple(deps), _tuple(p.get("setup")), p.get("lfn"))
        key = (spec.name, spec.version)
        if key in cfg.packages:
            raise ConfigError(f"duplicate package {spec.ref}")
        cfg.packages[key] = spec
    for c in _named(doc.get("commands"), "name"):
        cfg.commands[c["name"]] = CommandSpec(
            c["name"], str(c.get("version", "1")), _tuple(c.get("depends")), c.get("validation"), _profile(c.get("profile"))
        )
    parts = doc.get("grid_partitions") or {}
    cfg.grid_partitions = {k: _tuple(v) for k, v in parts.items()}
    pol = doc.get("policies") or {}
    cfg.policies = PolicyRules(
        tuple(sorted((k, int(v)) for k, v in (pol.get("role_boost") or {}).items())),
        tuple(sorted((k, int(v)) for k, v in (pol.get("user_caps") or {}).items())),
    )
    validate(cfg)
    return cfg


def validate(cfg: VOConfig):
    for ce in cfg.computing_elements.values():
        if ce.max_slots < 0:
            raise ConfigError(f"{ce.name}: negative slot count")
        for se in ce.close_se:
            if se not in cfg.storage_elements:
                raise ConfigError(f"{ce.name}: CloseSE {se} is not a known storage element")
    for spec in cfg.packages.values():
        for name, version in spec.depends:
            if not cfg.versions(name) or (version is not None and (name, version) not in cfg.packages):
                raise ConfigError(f"{spec.ref} depends on unknown package {name}::{version or 'any'}")
    for cmd in cfg.commands.values():
        for ref in cmd.depends:
            if not cfg.package_exists(ref):
                raise ConfigError(f"command {cmd.name} depends on unknown package {ref}")
    check_acyclic(cfg.packages)


def check_acyclic(packages: dict):
    """Reject cycles, treating an ``any`` edge as pointing at every version."""
    by_name: dict[str, list] = {}
    for (n, v) in packages:
        by_name.setdefault(n, []).append((n, v))
    WHITE, GREY, BLACK = 0, 1, 2
    color = {k: WHITE for k in packages}

    def succ(key):
        for name, version in packages[key].depends:
            if version is None:
                yield from by_name.get(name, ())
            elif (name, version) in packages:
                yield (name, version)

    for start in sorted(packages):
        if color[start] != WHITE:
            continue
        stack = [(start, iter(sorted(succ(start))))]
        color[start] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = BLACK
                stack.pop()
            elif color[nxt] == GREY:
                raise CycleDetected(f"package cycle through {nxt[0]}::{nxt[1]}")
            elif color[nxt] == WHITE:
                color[nxt] = GREY
                stack.append((nxt, iter(sorted(succ(nxt)))))


@functools.lru_cache(maxsize=32)
def _load_cached(path: str, mtime: float) -> VOConfig:
    with open(path) as fh:
        return from_dict(yaml.safe_load(fh), source=path)


def load(path) -> VOConfig:
    """Load a VO config file; repeated loads of an unchanged file hit the cache."""
    p = Path(path).resolve()
    if not p.exists():
        raise ConfigError(f"no such VO config: {path}")
    return _load_cached(str(p), p.stat().st_mtime)
