"""Distributed analysis: select a dataset, split it by data location, run, merge.

A task lives in the user's catalogue home under its tag.  Materializing it
registers one JDL and one JIO file per sub-job plus a YAML task object, so
the task can be reloaded from any later session and its results collected
whenever the user asks.
"""

from __future__ import annotations

import json
import posixpath
from collections import Counter
from dataclasses import asdict, dataclass, field

import yaml

from . import jdl
from .auth import Principal
from .broker import JobState
from .catalogue import PhysicalLocation
from .errors import AlreadyExists, EmptyDataset, GridError, NoResults, NotFound, PermissionDenied, TypeMismatch
from .site.storage import Blob

GATHER = "gather"
SCATTER = "scatter"
TASK_FILE = "task.yaml"
MERGED = "merged"


# ---------------------------------------------------------------- result types


@dataclass(frozen=True)
class Histogram:
    nbins: int
    lo: float
    hi: float
    counts: tuple
    underflow: int = 0
    overflow: int = 0

    def __post_init__(self):
        if len(self.counts) != self.nbins or any(c < 0 for c in self.counts):
            raise ValueError("counts must be nbins non-negative integers")

    def merge(self, other: "Histogram") -> "Histogram":
        if (self.nbins, self.lo, self.hi) != (other.nbins, other.lo, other.hi):
            raise TypeMismatch(f"cannot sum histograms with binning {self.binning} and {other.binning}")
        counts = tuple(a + b for a, b in zip(self.counts, other.counts))
        return Histogram(self.nbins, self.lo, self.hi, counts, self.underflow + other.underflow, self.overflow + other.overflow)

    @property
    def binning(self) -> tuple:
        return (self.nbins, self.lo, self.hi)

    @property
    def entries(self) -> int:
        return sum(self.counts) + self.underflow + self.overflow

    def to_doc(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        d["kind"] = "histogram"
        return d


@dataclass(frozen=True)
class RecordSet:
    """Order-insensitive multiset of opaque records."""

    records: Counter = field(default_factory=Counter)

    @classmethod
    def of(cls, items) -> "RecordSet":
        return cls(Counter(items))

    def merge(self, other: "RecordSet") -> "RecordSet":
        return RecordSet(self.records + other.records)

    def __len__(self):
        return sum(self.records.values())

    def __eq__(self, other):
        return isinstance(other, RecordSet) and +self.records == +other.records

    def to_doc(self) -> dict:
        rows = [json.loads(r) for r in sorted(self.records.elements())]
        return {"kind": "records", "rows": rows}


def decode_result(payload: bytes):
    """Parse an output file written by an analysis command."""
    doc = json.loads(payload)
    kind = doc.get("kind")
    if kind == "histogram":
        return Histogram(doc["nbins"], doc["lo"], doc["hi"], tuple(doc["counts"]), doc.get("underflow", 0), doc.get("overflow", 0))
    if kind == "records":
        return RecordSet.of(json.dumps(r, sort_keys=True) for r in doc["rows"])
    raise TypeMismatch(f"unknown result kind {kind!r}")


def merge_all(results):
    out = None
    for r in results:
        if out is None:
            out = r
        elif type(out) is not type(r):
            raise TypeMismatch(f"cannot merge {type(out).__name__} with {type(r).__name__}")
        else:
            out = out.merge(r)
    return out


# ---------------------------------------------------------------- the task object


@dataclass
class AnalysisTask:
    tag: str
    macro: str
    interpreter: str
    top_dir: str
    selection: str = "*"
    input_files: list = field(default_factory=list)
    hint_njobs: int = 1
    distribution_level: str = GATHER
    outputs: list = field(default_factory=list)
    owner: str = ""
    task_dir: str | None = None
    subjobs: list = field(default_factory=list)  # job id, or None when submission failed
    groups: list = field(default_factory=list)  # [{"files": [[lfn, se, protocol, path], ...], "ses": [...]}]
    failures: dict = field(default_factory=dict)  # sub-job index -> error text
    history: list = field(default_factory=list)  # earlier sub-job id lists, oldest first

    def __post_init__(self):
        if self.hint_njobs < 1:
            raise ValueError("hint_njobs must be at least 1")
        if self.distribution_level not in (GATHER, SCATTER):
            raise ValueError(f"distribution level must be {GATHER} or {SCATTER}")
        if not self.tag or "/" in self.tag:
            raise ValueError(f"bad task tag {self.tag!r}")

    def dump(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)

    @classmethod
    def load(cls, text: str) -> "AnalysisTask":
        doc = yaml.safe_load(text)
        doc["failures"] = {int(k): v for k, v in (doc.get("failures") or {}).items()}
        return cls(**doc)


# ---------------------------------------------------------------- selection & split


def selection_query(top_dir: str, selection: str) -> str:
    pattern, q, meta = (selection or "*").partition("?")
    pattern = pattern.strip("/") or "*"
    return posixpath.join(top_dir.rstrip("/") or "/", pattern) + (q + meta)


def select_dataset(catalogue, top_dir: str, selection: str, principal: Principal) -> list[tuple[str, list]]:
    """(LFN, replicas) for every file below ``top_dir`` matching ``selection``.

    ``selection`` is a path pattern relative to ``top_dir`` optionally followed
    by ``?Tag:predicate``, as in ``*/*.root?Run:energy>10``.
    """
    entry = catalogue.lookup(top_dir, principal)
    if not entry.is_dir:
        raise NotFound(f"{top_dir} is not a directory")
    if not catalogue.check_access(top_dir, principal, "r"):
        raise PermissionDenied(f"{top_dir} is not readable")
    out = []
    for lfn in catalogue.find(selection_query(top_dir, selection), principal):
        reps = sorted(catalogue.lookup(lfn, principal).replicas, key=lambda r: (r.se_name, r.path))
        out.append((lfn, reps))
    return out


def target_ses(group) -> frozenset:
    sets = [frozenset(r.se_name for r in reps) for _, reps in group]
    common = frozenset.intersection(*sets) if sets else frozenset()
    return common or frozenset().union(*sets)


def _chunks(group, k):
    q, r = divmod(len(group), k)
    out, start = [], 0
    for i in range(k):
        end = start + q + (1 if i < r else 0)
        out.append(group[start:end])
        start = end
    return out


def _grow(groups, want):
    """Cut groups into even chunks so that there are ``want`` in total, favouring the largest."""
    pieces = [1] * len(groups)
    while sum(pieces) < want:
        cands = [k for k in range(len(groups)) if pieces[k] < len(groups[k])]
        if not cands:
            break
        k = max(cands, key=lambda k: (len(groups[k]) / pieces[k], -k))
        pieces[k] += 1
    return [c for g, n in zip(groups, pieces) for c in _chunks(g, n)]


def split(dataset, hint_njobs: int, distribution_level: str = GATHER) -> list[tuple[list, frozenset]]:
    """Partition ``dataset`` into sub-datasets, each with the SEs it should run near.

    Files with the same replica SEs start in one group.  ``gather`` then merges
    groups that still share an SE while there are more than ``hint_njobs``;
    ``scatter`` never merges.  Both split the largest groups while there are
    fewer than the hint, which costs no locality.  The hint is a guideline.
    """
    if not dataset:
        raise EmptyDataset("selection matched no files")
    if distribution_level not in (GATHER, SCATTER):
        raise ValueError(f"unknown distribution level {distribution_level!r}")
    by_key: dict[frozenset, list] = {}
    for lfn, reps in sorted(dataset, key=lambda x: x[0]):
        by_key.setdefault(frozenset(r.se_name for r in reps), []).append((lfn, reps))
    groups = [by_key[k] for k in sorted(by_key, key=lambda k: (sorted(k), len(k)))]
    if distribution_level == GATHER:
        while len(groups) > hint_njobs:
            best = None
            for i in range(len(groups)):
                si = frozenset.intersection(*[frozenset(r.se_name for r in reps) for _, reps in groups[i]])
                for j in range(i + 1, len(groups)):
                    sj = frozenset.intersection(*[frozenset(r.se_name for r in reps) for _, reps in groups[j]])
                    common = si & sj
                    if common:
                        score = (-len(common), len(groups[i]) + len(groups[j]), i, j)
                        if best is None or score < best[0]:
                            best = (score, i, j)
            if best is None:
                break
            _, i, j = best
            merged = sorted(groups[i] + groups[j], key=lambda x: x[0])
            groups = [g for k, g in enumerate(groups) if k not in (i, j)] + [merged]
    groups = _grow(groups, min(hint_njobs, len(dataset)))
    groups.sort(key=lambda g: g[0][0])
    return [(g, target_ses(g)) for g in groups]


def planned_movement(parts) -> int:
    """Files whose group targets no SE holding a replica of them."""
    return sum(1 for group, ses in parts for _, reps in group if not {r.se_name for r in reps} & ses)


# ---------------------------------------------------------------- the client


def jio_text(group) -> str:
    lines = []
    for lfn, reps in group:
        r = reps[0] if reps else PhysicalLocation("-", "-", "-")
        lines.append(f"{lfn} {r.se_name} {r.protocol} {r.path}")
    return "\n".join(lines) + "\n"


def parse_jio(text: str) -> list[tuple[str, PhysicalLocation]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"JIO line {n}: expected 4 fields, got {len(parts)}")
        out.append((parts[0], PhysicalLocation(parts[1], parts[2], parts[3])))
    return out


class Analysis:
    """Client-side orchestration of analysis tasks over one grid."""

    def __init__(self, grid, principal: Principal, se: str | None = None):
        self.grid = grid
        self.principal = principal
        self.se = se or sorted(grid.storage)[0]

    @property
    def broker(self):
        return self.grid.broker

    @property
    def catalogue(self):
        return self.grid.catalogue

    def home(self) -> str:
        return self.grid.config.home(self.principal.user)

    def task_dir(self, tag: str) -> str:
        return posixpath.join(self.home(), tag)

    # -- files owned by the task

    def _put(self, lfn: str, payload: bytes):
        se = self.grid.storage[self.se]
        if self.catalogue.exists(lfn):
            self.grid.delete(lfn, self.principal)
        se.store(lfn, Blob.of(payload))
        self.catalogue.register_file(lfn, PhysicalLocation(se.name, se.protocol, lfn), len(payload), self.principal)

    def _read(self, lfn: str) -> bytes:
        blob = self.grid.fetch(lfn, self.principal)
        if blob.payload is None:
            raise TypeMismatch(f"{lfn} holds no readable content")
        return blob.payload

    def save(self, task: AnalysisTask):
        self._put(posixpath.join(task.task_dir, TASK_FILE), task.dump().encode())

    def load(self, tag_or_dir: str) -> AnalysisTask:
        d = tag_or_dir if tag_or_dir.startswith("/") else self.task_dir(tag_or_dir)
        return AnalysisTask.load(self._read(posixpath.join(d, TASK_FILE)).decode())

    # -- building sub-jobs

    def subjob_ad(self, task: AnalysisTask, group: dict) -> jdl.ClassAd:
        ad = jdl.ClassAd()
        ad["Executable"] = task.interpreter
        ad["Arguments"] = [task.macro]
        ad["InputData"] = [f[0] for f in group["files"]] + list(task.input_files)
        ad["OutputFiles"] = list(task.outputs)
        near = jdl.any_member("CloseSE", group["ses"])
        if near is not None:
            ad["Requirements"] = near
        return ad

    def _submit_all(self, task: AnalysisTask):
        task.failures = {}
        ids = []
        for i, group in enumerate(task.groups):
            ad = self.subjob_ad(task, group)
            self._put(posixpath.join(task.task_dir, f"subjob{i}.jdl"), (jdl.unparse(ad) + "\n").encode())
            try:
                jid = self.broker.submit(ad, self.principal)
                self.broker.elaborate(jid)
            except GridError as exc:
                task.failures[i] = str(exc)
                jid = None
            ids.append(jid)
        task.subjobs = ids

    def materialize(self, task: AnalysisTask, parts=None) -> AnalysisTask:
        """Register the task's files under the user's home and submit its sub-jobs.

        Per-sub-job submission errors do not abort the task; they are listed in
        ``task.failures``.
        """
        task_dir = self.task_dir(task.tag)
        if self.catalogue.exists(task_dir, self.principal):
            raise AlreadyExists(f"task {task.tag} already exists at {task_dir}")
        if parts is None:
            ds = select_dataset(self.catalogue, task.top_dir, task.selection, self.principal)
            parts = split(ds, task.hint_njobs, task.distribution_level)
        task.owner = self.principal.user
        task.task_dir = task_dir
        task.groups = [
            {"files": [[lfn, *(astuple_loc(reps[0]) if reps else ("-", "-", "-"))] for lfn, reps in group], "ses": sorted(ses)}
            for group, ses in parts
        ]
        self.catalogue.mkdir(task_dir, self.principal)
        for i, (group, _) in enumerate(parts):
            self._put(posixpath.join(task_dir, f"subjob{i}.jio"), jio_text(group).encode())
        self._submit_all(task)
        self.save(task)
        return task

    def spawn(self, tag: str, macro: str, interpreter: str, top_dir: str, selection: str = "*", **kw) -> AnalysisTask:
        return self.materialize(AnalysisTask(tag, macro, interpreter, top_dir, selection, **kw))

    def resubmit(self, task: AnalysisTask, macro: str | None = None) -> AnalysisTask:
        """Run the same dataset and split again, optionally with another macro."""
        if task.task_dir is None:
            raise NotFound(f"task {task.tag} was never materialized")
        for jid in task.subjobs:
            if jid is not None and not self.broker.job(jid).terminal:
                self.broker.kill(jid, self.principal)
        task.history.append(list(task.subjobs))
        if macro is not None:
            task.macro = macro
        merged = posixpath.join(task.task_dir, MERGED)
        if self.catalogue.exists(merged, self.principal):
            self.grid.delete(merged, self.principal, recursive=True)
        self._submit_all(task)
        self.save(task)
        return task

    # -- following a task

    def status(self, task: AnalysisTask) -> dict:
        if task.task_dir is None:
            raise NotFound(f"task {task.tag} was never materialized")
        per_job = {}
        counts: Counter = Counter()
        for i, jid in enumerate(task.subjobs):
            state = "UNSUBMITTED" if jid is None else self.broker.job(jid).state.value
            per_job[i] = (jid, state)
            counts[state] += 1
        return {"tag": task.tag, "subjobs": per_job, "counts": dict(sorted(counts.items())), "total": len(task.subjobs)}

    def collect(self, task: AnalysisTask) -> tuple[dict, int, int]:
        """Merged outputs of the VALIDATED sub-jobs so far, with (terminal, total) counts."""
        names = {}
        terminal = 0
        for jid in task.subjobs:
            if jid is None:
                terminal += 1
                continue
            job = self.broker.job(jid)
            if not job.terminal:
                continue
            terminal += 1
            if job.state != JobState.VALIDATED:
                continue
            for lfn in sorted(self.broker.output_lfns(job)):
                names.setdefault(posixpath.basename(lfn), []).append(decode_result(self._read(lfn)))
        if terminal == 0:
            raise NoResults(f"no sub-job of task {task.tag} has finished")
        merged = {name: merge_all(results) for name, results in sorted(names.items())}
        return merged, terminal, len(task.subjobs)

    def collect_merge(self, task: AnalysisTask) -> dict:
        """Merge what is available; once every sub-job is final, register the result."""
        merged, terminal, total = self.collect(task)
        if terminal == total:
            out_dir = posixpath.join(task.task_dir, MERGED)
            if self.catalogue.exists(out_dir, self.principal):
                self.grid.delete(out_dir, self.principal, recursive=True)
            self.catalogue.mkdir(out_dir, self.principal)
            for name, result in merged.items():
                self._put(posixpath.join(out_dir, name), json.dumps(result.to_doc(), sort_keys=True).encode())
        return merged


def astuple_loc(loc: PhysicalLocation) -> tuple:
    return (loc.se_name, loc.protocol, loc.path)


__all__ = [
    "GATHER", "SCATTER", "Analysis", "AnalysisTask", "Histogram", "RecordSet", "decode_result", "jio_text",
    "merge_all", "parse_jio", "planned_movement", "select_dataset", "selection_query", "split", "target_ses",
]
