"""UNIX-like shell over a grid, plus the ``simulate`` batch command.

Exit codes: 0 success, 1 domain error (one ``Kind: message`` line on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import posixpath
import shlex
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

from . import config as vo_config
from .analysis import GATHER, SCATTER, Analysis, AnalysisTask, Histogram
from .auth import ADMIN
from .broker import HELD, TERMINAL, JobState
from .catalogue import PhysicalLocation, normpath
from .errors import (AuthExpired, GridError, InvariantViolation, NoSuchTag, NotADirectory, PermissionDenied,
                     ScenarioParseError, UnknownSE)
from .grid import Grid
from .simnet import Simulation, load_scenario, run_scenario
from .site.storage import Blob

OK, DOMAIN, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _ArgParser(argparse.ArgumentParser):
    def __init__(self, prog, **kw):
        super().__init__(prog=prog, add_help=False, **kw)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class Result:
    out: str = ""
    err: str = ""
    code: int = OK


@dataclass
class Output:
    text: str
    data: object = None


def mode_string(kind: str, perms: int, is_dir: bool) -> str:
    lead = "d" if is_dir else ("l" if kind == "symlink" else "-")
    bits = "".join(ch if perms & (1 << (8 - i)) else "-" for i, ch in enumerate("rwxrwxrwx"))
    return lead + bits


def _lines(items) -> str:
    return "".join(f"{x}\n" for x in items)


class ShellSession:
    """One user's shell: credentials, working directory and the grid it talks to."""

    COMMANDS = ("ls", "cd", "pwd", "mkdir", "rm", "ln", "mv", "register", "replicas", "tag", "find", "submit", "ps",
                "top", "kill", "priority", "transfer", "analysis", "log", "whoami", "advance", "help")

    def __init__(self, grid: Grid, user: str = "admin", sim: Simulation | None = None, fmt: str = "text",
                 ttl: float | None = None):
        self.grid = grid
        self.user = user
        self.sim = sim
        self.fmt = fmt
        self.ttl = ttl
        self._principal = None
        self.login()
        home = grid.config.home(user) if user != "admin" else "/"
        self.cwd = home if grid.catalogue.exists(home, self.principal) else "/"

    # -- credentials

    def login(self):
        self._principal = ADMIN if self.user == "admin" else self.grid.login(self.user, self.ttl)

    @property
    def principal(self):
        return self._principal

    # -- entry points

    def execute(self, line: str) -> Result:
        try:
            argv = shlex.split(line, comments=True)
        except ValueError as exc:
            return Result(err=f"usage: {exc}\n", code=USAGE)
        return self.run(argv)

    def run(self, argv: list[str]) -> Result:
        if not argv:
            return Result()
        name, args = argv[0], argv[1:]
        if name not in self.COMMANDS:
            return Result(err=f"usage: unknown command {name!r}, try 'help'\n", code=USAGE)
        fn = getattr(self, "_cmd_" + name)
        try:
            try:
                out = fn(args)
            except AuthExpired:
                self.login()
                out = fn(args)
        except UsageError as exc:
            return Result(err=f"usage: {exc}\n", code=USAGE)
        except GridError as exc:
            return Result(err=f"{exc}\n", code=DOMAIN)
        if out is None:
            return Result()
        if self.fmt == "json" and out.data is not None:
            return Result(json.dumps(out.data, sort_keys=True) + "\n")
        return Result(out.text)

    # -- helpers

    def path(self, p: str) -> str:
        return normpath(p, self.cwd)

    @staticmethod
    def _parse(prog: str, args, spec):
        ap = _ArgParser(prog)
        for names, kw in spec:
            ap.add_argument(*names, **kw)
        return ap.parse_args(args)

    @property
    def cat(self):
        return self.grid.catalogue

    @property
    def broker(self):
        if not self.grid.broker_up:
            raise GridError("the central services are down")
        return self.grid.broker

    def _row(self, name: str, e) -> dict:
        row = {"name": name, "kind": e.kind, "owner": e.owner, "group": e.group, "perms": f"{e.perms:o}", "size": e.size}
        if e.kind == "file":
            row["replicas"] = len(e.replicas)
        if e.link_target:
            row["target"] = e.link_target
        return row

    # -- namespace

    def _cmd_pwd(self, args):
        self._parse("pwd", args, [])
        return Output(self.cwd + "\n", {"cwd": self.cwd})

    def _cmd_whoami(self, args):
        self._parse("whoami", args, [])
        p = self.principal
        return Output(f"{p.user} groups={','.join(p.groups)} roles={','.join(p.roles)}\n",
                      {"user": p.user, "groups": list(p.groups), "roles": list(p.roles)})

    def _cmd_cd(self, args):
        a = self._parse("cd", args, [(("path",), {"nargs": "?"})])
        target = self.path(a.path) if a.path else (self.grid.config.home(self.user) if self.user != "admin" else "/")
        e = self.cat.lookup(target, self.principal)
        if not e.is_dir:
            raise NotADirectory(target)
        if not self.cat.check_access(target, self.principal, "x"):
            raise PermissionDenied(f"search permission denied on {target}")
        self.cwd = target

    def _cmd_ls(self, args):
        a = self._parse("ls", args, [(("-l",), {"action": "store_true", "dest": "long"}), (("paths",), {"nargs": "*"})])
        text, data = [], []
        for p in a.paths or [self.cwd]:
            path = self.path(p)
            e = self.cat.lookup(path, self.principal, follow=False)
            if e.is_dir or (e.kind == "symlink" and self.cat.lookup(path, self.principal).is_dir):
                items = [(c.name, c) for c in self.cat.listdir(path, self.principal)]
            else:
                items = [(posixpath.basename(path), e)]
            for name, c in items:
                row = self._row(name, c)
                data.append(row if len(a.paths) <= 1 else {**row, "dir": path})
                shown = name + ("/" if c.is_dir else "")
                if a.long:
                    extra = f" -> {c.link_target}" if c.link_target else ""
                    text.append(f"{mode_string(c.kind, c.perms, c.is_dir)} {c.owner} {c.group} {c.size} {shown}{extra}")
                else:
                    text.append(shown)
        return Output(_lines(text), data)

    def _cmd_mkdir(self, args):
        a = self._parse("mkdir", args, [(("-p",), {"action": "store_true", "dest": "parents"}), (("paths",), {"nargs": "+"})])
        for p in a.paths:
            path = self.path(p)
            if a.parents and self.cat.exists(path, self.principal):
                continue
            self.cat.mkdir(path, self.principal, parents=a.parents)

    def _cmd_rm(self, args):
        a = self._parse("rm", args, [(("-r",), {"action": "store_true", "dest": "recursive"}), (("paths",), {"nargs": "+"})])
        for p in a.paths:
            self.grid.delete(self.path(p), self.principal, recursive=a.recursive)

    def _cmd_ln(self, args):
        a = self._parse("ln", args, [(("-s",), {"action": "store_true", "dest": "symbolic"}), (("target",), {}), (("link",), {})])
        if not a.symbolic:
            raise UsageError("ln: only symbolic links exist in the catalogue; use ln -s")
        target = a.target if a.target.startswith("/") else self.path(a.target)
        self.cat.symlink(self.path(a.link), target, self.principal)

    def _cmd_mv(self, args):
        a = self._parse("mv", args, [(("src",), {}), (("dst",), {})])
        src, dst = self.path(a.src), self.path(a.dst)
        if self.cat.exists(dst, self.principal) and self.cat.lookup(dst, self.principal).is_dir:
            dst = posixpath.join(dst, posixpath.basename(src))
        self.cat.rename(src, dst, self.principal)

    def _cmd_register(self, args):
        a = self._parse("register", args, [(("lfn",), {}), (("se",), {}), (("size",), {"type": int})])
        if a.size < 0:
            raise UsageError("register: size must be non-negative")
        se = self.grid.storage.get(a.se)
        if se is None:
            raise UnknownSE(a.se)
        lfn = self.path(a.lfn)
        self.cat.lookup(posixpath.dirname(lfn), self.principal)
        blob = Blob(a.size, lfn)
        se.store(lfn, blob)
        try:
            self.cat.register_file(lfn, PhysicalLocation(se.name, se.protocol, lfn), a.size, self.principal)
        except GridError:
            se.delete(lfn)
            raise
        return Output(f"{lfn}\n", {"lfn": lfn, "se": se.name, "size": a.size})

    def _cmd_replicas(self, args):
        a = self._parse("replicas", args, [(("lfn",), {})])
        e = self.cat.lookup(self.path(a.lfn), self.principal)
        reps = sorted(e.replicas, key=lambda r: (r.se_name, r.path))
        return Output(_lines(str(r) for r in reps), [{"se": r.se_name, "protocol": r.protocol, "path": r.path} for r in reps])

    def _cmd_tag(self, args):
        if not args or args[0] not in ("define", "set", "show"):
            raise UsageError("tag define <dir> <tag> attr:type... | tag set <lfn> <tag> attr=value... | tag show <path> [tag]")
        sub, rest = args[0], args[1:]
        if sub == "define":
            a = self._parse("tag define", rest, [(("dir",), {}), (("tag",), {}), (("attrs",), {"nargs": "+"})])
            schema = []
            for item in a.attrs:
                attr, sep, typ = item.partition(":")
                if not sep:
                    raise UsageError(f"tag define: expected attr:type, got {item!r}")
                schema.append((attr, typ))
            self.cat.define_tag(self.path(a.dir), a.tag, schema, self.principal)
            return None
        if sub == "set":
            a = self._parse("tag set", rest, [(("lfn",), {}), (("tag",), {}), (("values",), {"nargs": "+"})])
            lfn = self.path(a.lfn)
            types = dict(self.cat.tag_schema(posixpath.dirname(lfn), self.principal).get(a.tag, []))
            values = {}
            for item in a.values:
                attr, sep, raw = item.partition("=")
                if not sep:
                    raise UsageError(f"tag set: expected attr=value, got {item!r}")
                values[attr] = _typed(raw, types.get(attr))
            self.cat.set_tag_values(lfn, a.tag, values, self.principal)
            return None
        a = self._parse("tag show", rest, [(("path",), {}), (("tag",), {"nargs": "?"})])
        path = self.path(a.path)
        e = self.cat.lookup(path, self.principal)
        if not e.is_dir:
            tags = [a.tag] if a.tag else sorted(self.cat.tag_schema(posixpath.dirname(path), self.principal))
            data = {t: self.cat.tag_values(path, t, self.principal) for t in tags}
            return Output(_lines(f"{t} {_fmt_row(v)}" for t, v in data.items()), data)
        schemas = self.cat.tag_schema(path, self.principal)
        tags = [a.tag] if a.tag else sorted(schemas)
        text, data = [], {}
        for t in tags:
            if t not in schemas:
                raise NoSuchTag(f"{path} has no tag {t}")
            text.append(f"{t}: " + " ".join(f"{x}:{y}" for x, y in schemas[t]))
            rows = {}
            for c in self.cat.listdir(path, self.principal):
                if c.kind == "file":
                    v = self.cat.tag_values(posixpath.join(path, c.name), t, self.principal)
                    if v is not None:
                        rows[c.name] = v
                        text.append(f"  {c.name} {_fmt_row(v)}")
            data[t] = {"schema": [list(x) for x in schemas[t]], "rows": rows}
        return Output(_lines(text), data)

    def _cmd_find(self, args):
        a = self._parse("find", args, [(("query",), {})])
        q = a.query
        if q.startswith("lfn://") or q.startswith("/"):
            hits = self.cat.find(q, self.principal)
        else:
            hits = self.cat.find(self.path(q.partition("?")[0]) + "".join(q.partition("?")[1:]), self.principal)
        return Output(_lines(hits), hits)

    # -- jobs

    def _read_jdl(self, ref: str) -> str:
        p = Path(ref)
        if p.is_file():
            return p.read_text()
        blob = self.grid.fetch(self.path(ref), self.principal)
        if blob.payload is None:
            raise GridError(f"{ref} holds no JDL text")
        return blob.payload.decode()

    def _cmd_submit(self, args):
        a = self._parse("submit", args, [(("jdl",), {}), (("-p", "--priority"), {"type": int, "default": 0})])
        text = self._read_jdl(a.jdl)
        jid = self.broker.submit(text, self.principal, a.priority)
        self.broker.elaborate(jid)
        return Output(f"{jid}\n", {"id": jid})

    def _cmd_ps(self, args):
        a = self._parse("ps", args, [(("-a",), {"action": "store_true", "dest": "all"})])
        b = self.broker
        rows = [r for r in b.job_rows() if a.all or r["state"] not in {s.value for s in TERMINAL}]
        return Output(b.dump(include_terminal=a.all), rows)

    def _cmd_top(self, args):
        self._parse("top", args, [])
        b = self.broker
        raw = b.counts()
        counts = {s.value: raw[s.value] for s in JobState if raw.get(s.value)}
        per_ce: dict[str, int] = {}
        for jid in b.ids_in(*HELD):
            ce = b.jobs[jid].assigned_ce
            per_ce[ce] = per_ce.get(ce, 0) + 1
        ces = {}
        for name, spec in sorted(self.grid.config.computing_elements.items()):
            ces[name] = {"held": per_ce.get(name, 0), "slots": spec.max_slots}
        for name in sorted(set(per_ce) - set(ces)):
            ces[name] = {"held": per_ce[name], "slots": None}
        transfers: dict[str, int] = {}
        for t in b.transfers.values():
            transfers[t.state.value] = transfers.get(t.state.value, 0) + 1
        now = self.grid.clock()
        data = {"time": now, "jobs": {"total": len(b.jobs), **counts}, "ces": ces, "transfers": transfers}
        text = [f"time {now:.3f}", "jobs " + " ".join(f"{k}={v}" for k, v in data["jobs"].items())]
        text += [f"{n} {c['held']}/{'-' if c['slots'] is None else c['slots']}" for n, c in ces.items()]
        text.append("transfers " + (" ".join(f"{k}={v}" for k, v in sorted(transfers.items())) or "none"))
        return Output(_lines(text), data)

    def _cmd_kill(self, args):
        a = self._parse("kill", args, [(("id",), {"type": int})])
        if self.sim is not None:
            self.sim.kill(a.id, self.principal, self.grid.name)
        else:
            self.broker.kill(a.id, self.principal)
        return Output(f"killed {a.id}\n", {"killed": a.id})

    def _cmd_priority(self, args):
        a = self._parse("priority", args, [(("id",), {"type": int}), (("value",), {"type": int})])
        self.broker.set_priority(a.id, a.value, self.principal)

    def _cmd_transfer(self, args):
        a = self._parse("transfer", args, [(("lfn",), {}), (("se",), {})])
        lfn = self.cat.realpath(self.path(a.lfn), self.principal)
        if not self.cat.check_access(lfn, self.principal, "r"):
            raise PermissionDenied(f"read permission denied on {lfn}")
        tid = self.broker.submit_transfer(lfn, a.se, requester=self.principal.user)
        return Output(f"{tid}\n", {"id": tid})

    def _cmd_log(self, args):
        a = self._parse("log", args, [(("-e",), {"action": "store_true", "dest": "errors"}),
                                      (("-n",), {"type": int, "default": None, "dest": "n"})])
        evs = self.grid.log.query(severity="error" if a.errors else None)
        if a.n is not None:
            evs = evs[-a.n:] if a.n > 0 else []
        return Output(self.grid.log.dump(evs), [
            {"time": e.time, "severity": e.severity, "source": e.source, "subject": e.subject, "message": e.message} for e in evs
        ])

    # -- analysis

    def _cmd_analysis(self, args):
        if not args or args[0] not in ("spawn", "status", "merge", "resubmit"):
            raise UsageError("analysis spawn|status|merge|resubmit <tag> ...")
        sub, rest = args[0], args[1:]
        client = Analysis(self.grid, self.principal)
        if sub == "spawn":
            a = self._parse("analysis spawn", rest, [
                (("tag",), {}), (("--macro",), {"required": True}), (("--interpreter",), {"required": True}),
                (("--dir",), {"required": True}), (("--select",), {"default": "*"}), (("--hint",), {"type": int, "default": 1}),
                (("--level",), {"choices": (GATHER, SCATTER), "default": GATHER}),
                (("--output",), {"action": "append", "default": []}), (("--input",), {"action": "append", "default": []}),
            ])
            if a.hint < 1:
                raise UsageError("analysis spawn: --hint must be at least 1")
            task = AnalysisTask(a.tag, a.macro, a.interpreter, self.path(a.dir), a.select,
                                [self.path(f) for f in a.input], a.hint, a.level, a.output)
            client.materialize(task)
            text = [f"{task.task_dir} {len(task.subjobs)} sub-jobs: " + " ".join(str(j) for j in task.subjobs)]
            text += [f"sub-job {i} not submitted: {msg}" for i, msg in sorted(task.failures.items())]
            return Output(_lines(text), {"task_dir": task.task_dir, "subjobs": task.subjobs,
                                         "failures": {str(k): v for k, v in task.failures.items()}})
        if sub == "resubmit":
            a = self._parse("analysis resubmit", rest, [(("tag",), {}), (("--macro",), {"default": None})])
            task = client.resubmit(client.load(a.tag), a.macro)
            return Output(f"{task.task_dir} {len(task.subjobs)} sub-jobs: " + " ".join(str(j) for j in task.subjobs) + "\n",
                          {"task_dir": task.task_dir, "subjobs": task.subjobs})
        a = self._parse(f"analysis {sub}", rest, [(("tag",), {})])
        task = client.load(a.tag)
        if sub == "status":
            st = client.status(task)
            text = [f"{task.tag} " + " ".join(f"{k}={v}" for k, v in st["counts"].items())]
            text += [f"  {i} {jid if jid is not None else '-'} {state}" for i, (jid, state) in sorted(st["subjobs"].items())]
            return Output(_lines(text), {"tag": task.tag, "counts": st["counts"], "total": st["total"],
                                         "subjobs": [{"index": i, "id": j, "state": s} for i, (j, s) in sorted(st["subjobs"].items())]})
        merged = client.collect_merge(task)
        text = []
        for name, r in merged.items():
            if isinstance(r, Histogram):
                text.append(f"{name} histogram nbins={r.nbins} range=[{r.lo:g},{r.hi:g}) entries={r.entries}")
                text.append("  " + " ".join(str(c) for c in r.counts))
            else:
                text.append(f"{name} records n={len(r)}")
        return Output(_lines(text), {n: r.to_doc() for n, r in merged.items()})

    # -- live simulation

    def _cmd_advance(self, args):
        a = self._parse("advance", args, [(("seconds",), {"type": float})])
        if self.sim is None:
            raise UsageError("advance: no live simulation attached")
        if a.seconds < 0:
            raise UsageError("advance: time only moves forward")
        self.sim.clock.run(self.sim.clock.now + a.seconds)
        return Output(f"time {self.sim.clock.now:.3f}\n", {"time": self.sim.clock.now})

    def _cmd_help(self, args):
        return Output(_lines(sorted(self.COMMANDS)), sorted(self.COMMANDS))


def _typed(raw: str, typ: str | None):
    if typ == "int":
        try:
            return int(raw)
        except ValueError:
            return raw
    if typ == "float":
        try:
            return float(raw)
        except ValueError:
            return raw
    return raw


def _fmt_row(row) -> str:
    if row is None:
        return "-"
    return " ".join(f"{k}={v}" for k, v in sorted(row.items()))


def split_commands(text: str) -> list[list[str]]:
    """Token lists, one per command; ``;`` and newlines separate commands."""
    out = []
    for line in text.splitlines():
        lex = shlex.shlex(line, posix=True, punctuation_chars=";")
        lex.whitespace_split = True
        lex.commenters = "#"
        cur: list[str] = []
        for tok in lex:
            if tok and set(tok) == {";"}:
                if cur:
                    out.append(cur)
                cur = []
            else:
                cur.append(tok)
        if cur:
            out.append(cur)
    return out


# ---------------------------------------------------------------- process entry points


def open_grid(state: str | None, vo: str | None) -> Grid:
    if state is None:
        if vo is None:
            raise UsageError("need --vo FILE (or --state DIR holding one)")
        return Grid(vo_config.load(vo))
    d = Path(state)
    d.mkdir(parents=True, exist_ok=True)
    stored = d / "vo.yaml"
    if vo is not None and not stored.exists():
        shutil.copyfile(vo, stored)
    if not stored.exists():
        raise UsageError(f"{state} holds no grid yet; pass --vo FILE to create one")
    return Grid(vo_config.load(stored), state_dir=d)


def _shell(a, stdin, stdout, stderr) -> int:
    sim = None
    try:
        if a.scenario:
            sim = Simulation(load_scenario(a.scenario), a.seed)
            grid = sim.runtimes["main"].grid
        else:
            grid = open_grid(a.state, a.vo)
        session = ShellSession(grid, a.user, sim, a.format)
    except UsageError as exc:
        stderr.write(f"usage: {exc}\n")
        return USAGE
    except ScenarioParseError as exc:
        stderr.write(f"{exc}\n")
        return USAGE
    except GridError as exc:
        stderr.write(f"{exc}\n")
        return DOMAIN
    interactive = False
    if a.command:
        text = "\n".join(a.command)
    elif a.script and a.script != "-":
        text = Path(a.script).read_text()
    else:
        interactive = stdin.isatty()
        text = None
    code = OK
    try:
        if interactive:
            while True:
                stdout.write(f"minigrid:{session.cwd}> ")
                stdout.flush()
                line = stdin.readline()
                if not line:
                    break
                for argv in split_commands(line):
                    r = session.run(argv)
                    stdout.write(r.out)
                    stderr.write(r.err)
                    code = r.code
        else:
            if text is None:
                text = stdin.read()
            for argv in split_commands(text):
                r = session.run(argv)
                stdout.write(r.out)
                stderr.write(r.err)
                code = r.code
                if code != OK:
                    break
    finally:
        if sim is None:
            grid.save()
    return code


def _simulate(a, stdout, stderr) -> int:
    if not Path(a.scenario).is_file():
        stderr.write(f"usage: no such scenario file {a.scenario}\n")
        return USAGE
    try:
        metrics, _ = run_scenario(Path(a.scenario), a.seed, a.until, a.trace, a.metrics, False if a.no_check else None)
    except ScenarioParseError as exc:
        stderr.write(f"{exc}\n")
        return USAGE
    except InvariantViolation as exc:
        stderr.write(f"{exc}\n")
        return DOMAIN
    if a.format == "json":
        stdout.write(metrics.to_json())
    else:
        jobs = " ".join(f"{k}={v}" for k, v in metrics.jobs.items())
        stdout.write(f"scenario {metrics.scenario} seed {metrics.seed}\n"
                     f"jobs {jobs}\n"
                     f"makespan {metrics.makespan:.3f}\n"
                     f"max_concurrent_running {metrics.max_concurrent_running}\n"
                     f"bytes_transferred {metrics.bytes_transferred}\n"
                     f"finished {str(metrics.finished).lower()} stalled {str(metrics.stalled).lower()}\n")
    return OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="minigrid", description="Desk-scale grid middleware: shell and simulator.")
    sub = ap.add_subparsers(dest="mode")
    sh = sub.add_parser("shell", help="run shell commands against a grid")
    sh.add_argument("script", nargs="?", help="file of commands, '-' for stdin")
    sh.add_argument("-c", dest="command", action="append", help="command line to run (repeatable, ';' separates)")
    sh.add_argument("--state", help="directory holding a persistent grid")
    sh.add_argument("--vo", help="VO config used to create the grid")
    sh.add_argument("--scenario", help="attach to a live simulation of this scenario instead")
    sh.add_argument("--seed", type=int, default=None)
    sh.add_argument("--user", default="admin")
    sh.add_argument("--format", choices=("text", "json"), default="text")
    sm = sub.add_parser("simulate", help="run a scenario")
    sm.add_argument("scenario")
    sm.add_argument("--seed", type=int, default=None)
    sm.add_argument("--until", type=float, default=None)
    sm.add_argument("--trace")
    sm.add_argument("--metrics")
    sm.add_argument("--format", choices=("text", "json"), default="text")
    sm.add_argument("--no-check", action="store_true", help="skip the invariant checks")
    return ap


def main(argv=None, stdin=None, stdout=None, stderr=None) -> int:
    stdin, stdout, stderr = stdin or sys.stdin, stdout or sys.stdout, stderr or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("shell", "simulate", "-h", "--help"):
        argv.insert(0, "shell")
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    if a.mode == "simulate":
        return _simulate(a, stdout, stderr)
    return _shell(a, stdin, stdout, stderr)


if __name__ == "__main__":
    sys.exit(main())
