"""Scenario files: which grids to build, what to submit, what to break.

The schema is documented in ``docs/scenario.md``.  Every mapping read from
YAML remembers the line of each key so that semantic errors can point at the
offending line, not just syntax errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .. import config as vo_config
from .. import jdl as jdl_mod
from ..errors import ConfigError, GridError, ParseError, ScenarioParseError

FAULT_KINDS = ("crash", "restart", "partition_start", "partition_end")


class LineDict(dict):
    """dict that knows the source line of each key (1-based)."""

    lines: dict
    line: int | None = None

    def line_of(self, key) -> int | None:
        return self.lines.get(key, self.line)


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    loader.flatten_mapping(node)
    d = LineDict()
    d.lines = {}
    d.line = node.start_mark.line + 1
    for knode, vnode in node.value:
        key = loader.construct_object(knode, deep=True)
        d[key] = loader.construct_object(vnode, deep=True)
        d.lines[key] = knode.start_mark.line + 1
    return d


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def load_yaml(text: str, where: str = "<scenario>"):
    try:
        return yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        problem = getattr(exc, "problem", None) or str(exc)
        raise ScenarioParseError(f"{where}: {problem}", mark.line + 1 if mark else None,
                                 mark.column + 1 if mark else None) from None


def _err(doc, key, message):
    line = doc.line_of(key) if isinstance(doc, LineDict) else None
    return ScenarioParseError(message, line)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_plain(v) for v in x]
    return x


def _check_keys(doc, allowed, what):
    if not isinstance(doc, dict):
        raise ScenarioParseError(f"{what} must be a mapping", getattr(doc, "line", None))
    for k in doc:
        if k not in allowed:
            raise _err(doc, k, f"unknown key {k!r} in {what}")


def _num(doc, key, default, what, lo=None):
    v = doc.get(key, default)
    try:
        v = float(v)
    except (TypeError, ValueError):
        raise _err(doc, key, f"{what}.{key} must be a number, got {v!r}") from None
    if lo is not None and v < lo:
        raise _err(doc, key, f"{what}.{key} must be >= {lo}")
    return v


# ---------------------------------------------------------------------------- declarations


@dataclass(frozen=True)
class Settings:
    latency: float = 0.1
    heartbeat: float = 60.0
    missed_heartbeats: int = 3
    zombie_interval: float = 60.0
    optimizer: bool = True
    optimizer_interval: float = 120.0
    policy_interval: float = 300.0
    poll_interval: float = 30.0
    batch: str = "immediate"
    stagger: bool = True
    ftd_bandwidth: float = 1e8
    ftd_poll_interval: float = 30.0
    until: float = math.inf
    stall_after: float = 86400.0
    check_invariants: bool = True
    invariant_interval: float = 600.0


@dataclass(frozen=True)
class FileDecl:
    lfn: str
    se: str
    size: int = 1
    seed: str | None = None
    owner: str = "admin"
    tags: tuple = ()  # ((tag, ((attr, value), ...)), ...)
    line: int | None = None


@dataclass(frozen=True)
class TagDecl:
    dir: str
    tag: str
    schema: tuple
    owner: str = "admin"
    line: int | None = None


@dataclass(frozen=True)
class WorkloadDecl:
    user: str
    jdl: str
    count: int = 1
    at: float = 0.0
    every: float = 0.0
    priority: int = 0
    line: int | None = None


@dataclass(frozen=True)
class AnalysisDecl:
    tag: str
    user: str
    macro: str
    interpreter: str
    top_dir: str
    selection: str = "*"
    hint: int = 1
    level: str = "gather"
    outputs: tuple = ()
    input_files: tuple = ()
    at: float = 0.0
    line: int | None = None


@dataclass(frozen=True)
class FtdDecl:
    name: str
    site: str
    serves: tuple
    bandwidth: float
    poll_interval: float


@dataclass
class GridDecl:
    name: str
    vo: vo_config.VOConfig
    ces: dict = field(default_factory=dict)  # CE name -> {poll_interval, batch, fail_every}
    ftds: list = field(default_factory=list)
    files: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    workload: list = field(default_factory=list)
    analyses: list = field(default_factory=list)


@dataclass(frozen=True)
class FaultDecl:
    time: float
    target: str
    kind: str
    line: int | None = None


@dataclass(frozen=True)
class RandomFaults:
    fraction: float
    start: float
    end: float
    downtime: tuple
    grid: str = "main"
    targets: str = "ces"
    line: int | None = None


@dataclass(frozen=True)
class FederationDecl:
    name: str
    outer: str
    inner: str
    virtual_se: str
    user: str
    site: str
    capacity: int = 10**15
    poll_interval: float = 30.0
    line: int | None = None


@dataclass
class Scenario:
    name: str
    settings: Settings
    grids: dict  # name -> GridDecl, "main" first
    faults: list = field(default_factory=list)
    random_faults: list = field(default_factory=list)
    federations: list = field(default_factory=list)
    seed: int = 0
    source: str | None = None


# ---------------------------------------------------------------------------- parsing


def _vo(doc, key, base: Path | None):
    ref = doc.get(key)
    if ref is None:
        raise _err(doc, None, f"missing {key!r}")
    try:
        if isinstance(ref, str):
            p = Path(ref)
            if base is not None and not p.is_absolute():
                p = base / p
            return vo_config.load(p)
        if isinstance(ref, dict):
            return vo_config.from_dict(_plain(ref))
    except (ConfigError, GridError, KeyError, TypeError, ValueError) as exc:
        raise _err(doc, key, f"invalid VO config: {exc}") from None
    raise _err(doc, key, "vo must be a file path or a mapping")


def _settings(doc) -> Settings:
    if doc is None:
        return Settings()
    _check_keys(doc, Settings.__dataclass_fields__, "settings")
    kw = {}
    for k, v in doc.items():
        default = Settings.__dataclass_fields__[k].default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise _err(doc, k, f"settings.{k} must be true or false")
            kw[k] = v
        elif isinstance(default, str):
            kw[k] = str(v)
        elif isinstance(default, int):
            kw[k] = int(_num(doc, k, default, "settings", 0))
        else:
            kw[k] = _num(doc, k, default, "settings", 0)
    return Settings(**kw)


def _expand(template: str, i: int) -> str:
    return template.replace("{i}", str(i))


def _files(items, vo: vo_config.VOConfig) -> list:
    out = []
    for it in items or []:
        _check_keys(it, {"lfn", "se", "size", "seed", "owner", "tags", "count"}, "files entry")
        for k in ("lfn", "se"):
            if k not in it:
                raise _err(it, None, f"files entry needs {k!r}")
        if it["se"] not in vo.storage_elements:
            raise _err(it, "se", f"unknown storage element {it['se']!r}")
        owner = str(it.get("owner", "admin"))
        if owner != "admin" and owner not in vo.users:
            raise _err(it, "owner", f"unknown user {owner!r}")
        n = int(_num(it, "count", 1, "files", 1))
        tags = it.get("tags") or {}
        for i in range(n):
            tag_rows = tuple(
                (t, tuple(sorted((a, _expand(v, i) if isinstance(v, str) else v) for a, v in row.items())))
                for t, row in sorted(tags.items())
            )
            seed = it.get("seed")
            out.append(FileDecl(
                _expand(str(it["lfn"]), i), it["se"], int(_num(it, "size", 1, "files", 0)),
                None if seed is None else _expand(str(seed), i), owner, tag_rows, it.line,
            ))
    return out


def _tags(items) -> list:
    out = []
    for it in items or []:
        _check_keys(it, {"dir", "tag", "schema", "owner"}, "tags entry")
        schema = it.get("schema")
        if not isinstance(schema, dict) or not schema:
            raise _err(it, "schema", "tag schema must be a non-empty mapping attr: type")
        out.append(TagDecl(str(it["dir"]), str(it["tag"]), tuple(schema.items()), str(it.get("owner", "admin")), it.line))
    return out


def _workload(items, vo) -> list:
    out = []
    for it in items or []:
        _check_keys(it, {"user", "jdl", "count", "at", "every", "priority"}, "workload entry")
        if "jdl" not in it or "user" not in it:
            raise _err(it, None, "workload entry needs 'user' and 'jdl'")
        if it["user"] not in vo.users:
            raise _err(it, "user", f"unknown user {it['user']!r}")
        try:
            jdl_mod.parse(_expand(str(it["jdl"]), 0))
        except ParseError as exc:
            where = f" (JDL line {exc.line}, column {exc.column})" if exc.line is not None else ""
            raise _err(it, "jdl", f"bad JDL: {exc.detail}{where}") from None
        out.append(WorkloadDecl(
            str(it["user"]), str(it["jdl"]), int(_num(it, "count", 1, "workload", 0)), _num(it, "at", 0, "workload", 0),
            _num(it, "every", 0, "workload", 0), int(_num(it, "priority", 0, "workload")), it.line,
        ))
    return out


def _analyses(items, vo) -> list:
    out = []
    seen = set()
    for it in items or []:
        _check_keys(it, {"tag", "user", "macro", "interpreter", "top_dir", "selection", "hint", "level", "outputs",
                         "input_files", "at"}, "analyses entry")
        for k in ("tag", "user", "macro", "interpreter", "top_dir"):
            if k not in it:
                raise _err(it, None, f"analyses entry needs {k!r}")
        if it["user"] not in vo.users:
            raise _err(it, "user", f"unknown user {it['user']!r}")
        if it["interpreter"] not in vo.commands:
            raise _err(it, "interpreter", f"unknown command {it['interpreter']!r}")
        level = str(it.get("level", "gather"))
        if level not in ("gather", "scatter"):
            raise _err(it, "level", "level must be gather or scatter")
        key = (it["user"], it["tag"])
        if key in seen:
            raise _err(it, "tag", f"tag {it['tag']!r} used twice by {it['user']}")
        seen.add(key)
        out.append(AnalysisDecl(
            str(it["tag"]), str(it["user"]), str(it["macro"]), str(it["interpreter"]), str(it["top_dir"]),
            str(it.get("selection", "*")), int(_num(it, "hint", 1, "analyses", 1)), level,
            tuple(str(o) for o in it.get("outputs") or ()), tuple(str(f) for f in it.get("input_files") or ()),
            _num(it, "at", 0, "analyses", 0), it.line,
        ))
    return out


def _grid(name: str, doc, base, settings: Settings) -> GridDecl:
    _check_keys(doc, {"vo", "agents", "files", "tags", "workload", "analyses"}, f"grid {name}")
    vo = _vo(doc, "vo", base)
    g = GridDecl(name, vo)
    agents = doc.get("agents") or LineDict()
    if not isinstance(agents, LineDict):
        raise _err(doc, "agents", "agents must be a mapping")
    _check_keys(agents, {"ces", "ftds"}, "agents")
    for ce, opts in (agents.get("ces") or {}).items():
        if ce not in vo.computing_elements:
            raise _err(agents.get("ces"), ce, f"unknown computing element {ce!r}")
        _check_keys(opts, {"poll_interval", "batch", "fail_every"}, f"agents.ces.{ce}")
        g.ces[ce] = dict(opts)
    ftds = agents.get("ftds")
    if ftds is None:
        for se in sorted(vo.storage_elements.values(), key=lambda s: s.name):
            g.ftds.append(FtdDecl(f"FTD_{se.name}", se.site, (se.name,), settings.ftd_bandwidth, settings.ftd_poll_interval))
    else:
        for f in ftds:
            _check_keys(f, {"name", "site", "serves", "bandwidth", "poll_interval"}, "ftd entry")
            serves = tuple(f.get("serves") or ())
            for se in serves:
                if se not in vo.storage_elements:
                    raise _err(f, "serves", f"unknown storage element {se!r}")
            site = f.get("site") or (vo.storage_elements[serves[0]].site if serves else "central")
            g.ftds.append(FtdDecl(str(f["name"]), site, serves, _num(f, "bandwidth", settings.ftd_bandwidth, "ftd", 0),
                                  _num(f, "poll_interval", settings.ftd_poll_interval, "ftd", 0)))
    g.files = _files(doc.get("files"), vo)
    g.tags = _tags(doc.get("tags"))
    g.workload = _workload(doc.get("workload"), vo)
    g.analyses = _analyses(doc.get("analyses"), vo)
    return g


def _faults(items) -> list:
    out = []
    for it in items or []:
        _check_keys(it, {"time", "target", "kind", "duration"}, "fault entry")
        kind = it.get("kind")
        t = _num(it, "time", None, "fault", 0)
        if "target" not in it:
            raise _err(it, None, "fault entry needs a target")
        if kind == "partition":
            d = _num(it, "duration", None, "fault", 0)
            out.append(FaultDecl(t, str(it["target"]), "partition_start", it.line))
            out.append(FaultDecl(t + d, str(it["target"]), "partition_end", it.line))
            continue
        if kind not in FAULT_KINDS:
            raise _err(it, "kind", f"unknown fault kind {kind!r}")
        out.append(FaultDecl(t, str(it["target"]), kind, it.line))
    # restart only after crash, per target
    down: dict = {}
    for f in sorted(out, key=lambda f: f.time):
        if f.kind == "crash":
            down[f.target] = True
        elif f.kind == "restart":
            if not down.get(f.target):
                raise ScenarioParseError(f"restart of {f.target} at t={f.time:g} without a preceding crash", f.line)
            down[f.target] = False
    return out


def parse_scenario(text: str, source: str | None = None, base: Path | None = None) -> Scenario:
    doc = load_yaml(text, source or "<scenario>")
    if doc is None:
        doc = LineDict()
        doc.lines = {}
    _check_keys(doc, {"name", "seed", "vo", "agents", "files", "tags", "workload", "analyses", "settings", "grids",
                      "faults", "random_faults", "federations", "description"}, "scenario")
    settings = _settings(doc.get("settings"))
    grids = {}
    main_doc = LineDict({k: doc[k] for k in ("vo", "agents", "files", "tags", "workload", "analyses") if k in doc})
    main_doc.lines = {k: doc.line_of(k) for k in main_doc}
    main_doc.line = doc.line
    if "vo" not in main_doc:
        raise ScenarioParseError("scenario needs a 'vo' (config path or inline mapping)", 1)
    grids["main"] = _grid("main", main_doc, base, settings)
    for gname, gdoc in (doc.get("grids") or {}).items():
        if gname == "main":
            raise _err(doc.get("grids"), gname, "grid name 'main' is reserved")
        grids[str(gname)] = _grid(str(gname), gdoc, base, settings)
    rnd = []
    for it in doc.get("random_faults") or []:
        _check_keys(it, {"fraction", "start", "end", "downtime", "grid", "targets"}, "random_faults entry")
        dt = it.get("downtime", [300, 900])
        if not (isinstance(dt, list) and len(dt) == 2):
            raise _err(it, "downtime", "downtime must be [min, max]")
        g = str(it.get("grid", "main"))
        if g not in grids:
            raise _err(it, "grid", f"unknown grid {g!r}")
        rnd.append(RandomFaults(_num(it, "fraction", 0.5, "random_faults", 0), _num(it, "start", 0, "random_faults", 0),
                                _num(it, "end", 3600, "random_faults", 0), (float(dt[0]), float(dt[1])), g,
                                str(it.get("targets", "ces")), it.line))
    feds = []
    for it in doc.get("federations") or []:
        _check_keys(it, {"name", "outer", "inner", "virtual_se", "user", "site", "capacity", "poll_interval"}, "federation")
        for k in ("name", "inner", "virtual_se", "user"):
            if k not in it:
                raise _err(it, None, f"federation needs {k!r}")
        outer, inner = str(it.get("outer", "main")), str(it["inner"])
        for k, g in (("outer", outer), ("inner", inner)):
            if g not in grids:
                raise _err(it, k, f"unknown grid {g!r}")
        if it["user"] not in grids[inner].vo.users:
            raise _err(it, "user", f"user {it['user']!r} unknown in grid {inner}")
        feds.append(FederationDecl(str(it["name"]), outer, inner, str(it["virtual_se"]), str(it["user"]),
                                   str(it.get("site", f"{it['name']}-site")), int(_num(it, "capacity", 10**15, "federation", 0)),
                                   _num(it, "poll_interval", settings.poll_interval, "federation", 0), it.line))
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise _err(doc, "seed", "seed must be an integer")
    return Scenario(str(doc.get("name", Path(source).stem if source else "scenario")), settings, grids,
                    _faults(doc.get("faults")), rnd, feds, seed, source)


def load_scenario(path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc.strerror}") from None
    return parse_scenario(text, str(p), p.parent)
