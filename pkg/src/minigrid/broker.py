"""Central task queue: the pull-model job broker and the file transfer broker.

Computing elements call :meth:`Broker.request_job` with their ClassAd when they
have free slots; the broker never pushes.  Transfers share the queue
discipline and lifecycle, pulled by transfer daemons via
:meth:`Broker.request_transfer`.

Durable state is event-sourced into a journal so a crashed broker can be
rebuilt with :meth:`Broker.restore`.  Heartbeat timestamps are volatile and
reset on restore.
"""

from __future__ import annotations

import fnmatch
import posixpath
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from sortedcontainers import SortedList

from . import jdl
from .auth import ADMIN, Principal
from .catalogue import Catalogue
from .config import VOConfig, split_ref
from .errors import (
    AlreadyReplicated,
    IllegalTransition,
    InsufficientSpace,
    NotFound,
    ParseError,
    PermissionDenied,
    StaleReport,
    Terminal,
    UnknownCommand,
    UnknownJob,
    UnknownPackage,
    UnknownSE,
)
from .journal import Journal
from .logger import EventLog
from .packages import Resolver

DEFERRED = float("-inf")


class JobState(str, Enum):
    INSERTED = "INSERTED"
    WAITING = "WAITING"
    ASSIGNED = "ASSIGNED"
    RUNNING = "RUNNING"
    SAVING = "SAVING"
    DONE = "DONE"
    VALIDATED = "VALIDATED"
    FAILED = "FAILED"
    ZOMBIE = "ZOMBIE"

    def __str__(self):
        return self.value


S = JobState

TRANSITIONS = {
    S.INSERTED: {S.WAITING, S.FAILED},
    S.WAITING: {S.ASSIGNED, S.FAILED},
    S.ASSIGNED: {S.RUNNING, S.FAILED, S.ZOMBIE},
    S.RUNNING: {S.SAVING, S.FAILED, S.ZOMBIE},
    S.SAVING: {S.DONE, S.FAILED},
    S.DONE: {S.VALIDATED, S.FAILED},
    S.VALIDATED: set(),
    S.FAILED: set(),
    S.ZOMBIE: {S.WAITING, S.FAILED},
}

TRANSFER_TRANSITIONS = {
    S.INSERTED: {S.WAITING, S.FAILED},
    S.WAITING: {S.ASSIGNED, S.FAILED},
    S.ASSIGNED: {S.RUNNING, S.FAILED, S.ZOMBIE},
    S.RUNNING: {S.DONE, S.FAILED, S.ZOMBIE},
    S.DONE: set(),
    S.FAILED: set(),
    S.ZOMBIE: {S.WAITING, S.FAILED},
}

TERMINAL = frozenset({S.DONE, S.VALIDATED, S.FAILED})
HELD = frozenset({S.ASSIGNED, S.RUNNING, S.SAVING})  # occupying a CE slot
ACTIVE = frozenset(S) - TERMINAL


def legal(old: JobState, new: JobState, table=TRANSITIONS) -> bool:
    return new in table[old]


@dataclass
class Job:
    job_id: int
    owner: str
    jdl: jdl.ClassAd
    submitted: float
    elaborated_jdl: jdl.ClassAd | None = None
    state: JobState = S.INSERTED
    priority: float = 0
    base_priority: int = 0
    assigned_ce: str | None = None
    attempt: int = 0
    history: list = field(default_factory=list)
    started: float | None = None
    ended: float | None = None
    last_heartbeat: float = 0.0

    @property
    def command(self) -> str:
        return self.jdl.value("Executable")

    def list_attr(self, name) -> list:
        v = self.jdl.value(name)
        return [x for x in v if isinstance(x, str)] if isinstance(v, list) else []

    @property
    def inputs(self) -> list[str]:
        return [lfn_path(x) for x in self.list_attr("InputData")]

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL and not (self.state == S.DONE and self.awaiting_validation)

    awaiting_validation: bool = False


@dataclass
class TransferRequest:
    transfer_id: int
    lfn: str
    dest_se: str
    size: int
    requester: str
    submitted: float
    source_se: str | None = None
    state: JobState = S.INSERTED
    assigned_ftd: str | None = None
    attempt: int = 0
    history: list = field(default_factory=list)
    started: float | None = None
    ended: float | None = None
    last_heartbeat: float = 0.0


@dataclass
class ProvenanceRecord:
    subject: str
    inputs: list
    command: str
    packages: list
    outputs: list
    site: str | None
    submit_time: float
    start_time: float | None
    end_time: float | None
    final_state: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lfn_path(ref: str) -> str:
    """Strip an ``lfn://host`` prefix from a data reference."""
    if ref.startswith("lfn://"):
        rest = ref[len("lfn://") :]
        return rest[rest.find("/") :] if "/" in rest else "/"
    return ref


class Broker:
    def __init__(
        self,
        catalogue: Catalogue,
        config: VOConfig,
        storage: dict | None = None,
        clock: Callable[[], float] | None = None,
        journal: Journal | None = None,
        log: EventLog | None = None,
    ):
        self.catalogue = catalogue
        self.config = config
        self.storage = storage if storage is not None else {}
        self.clock = clock or (lambda: 0.0)
        self.journal = journal if journal is not None else Journal("broker")
        self.log = EventLog(self.clock) if log is None else log
        self.resolver = Resolver(config.packages)
        self.jobs: dict[int, Job] = {}
        self.transfers: dict[int, TransferRequest] = {}
        self.provenance: dict[str, ProvenanceRecord] = {}
        self.ce_ads: dict[str, jdl.ClassAd] = {}
        self.policy = None  # object with adjust(broker, users)
        self.listeners: list[Callable] = []
        self._waiting = SortedList()  # (-priority, job_id)
        self._waiting_transfers = SortedList()
        self._by_input: dict[str, set] = {}
        self._by_owner: dict[str, set] = {}
        self._by_state: dict[JobState, set] = {st: set() for st in S}
        self._active_transfers: dict[tuple, int] = {}  # (lfn, dest) -> transfer id
        self.awaiting = 0  # DONE jobs still to be validated
        self._lock = threading.RLock()
        self._last_ad = None
        self.next_job_id = 1
        self.next_transfer_id = 1
        self.inserted_ever = 0
        catalogue.job_owner = self._job_owner

    # ------------------------------------------------------------------ journal

    def _commit(self, rec: dict):
        self.journal.append(rec)
        self._apply(rec)

    def _apply(self, r: dict):
        getattr(self, "_apply_" + r["op"])(r)

    def _parsed(self, text: str) -> jdl.ClassAd:
        # the ad just unparsed by submit/elaborate is applied right away; skip re-parsing it
        hit = self._last_ad
        if hit is not None and hit[0] == text:
            return hit[1].copy()
        return jdl.parse(text)

    def _remember(self, ad: jdl.ClassAd) -> str:
        text = jdl.unparse(ad)
        self._last_ad = (text, ad)
        return text

    def _emit(self, kind: str, subject, detail: str = ""):
        for fn in self.listeners:
            fn(kind, subject, detail)

    def _set_state(self, job: Job, new: JobState, note: str, t: float):
        old = job.state
        if old == S.WAITING:
            self._waiting.discard((-job.priority, job.job_id))
        self._by_state[old].discard(job.job_id)
        self._by_state[new].add(job.job_id)
        job.state = new
        job.history.append((t, new.value, note))
        if new == S.WAITING and job.priority != DEFERRED:
            self._waiting.add((-job.priority, job.job_id))

    def _apply_submit(self, r):
        ad = self._parsed(r["jdl"])
        job = Job(r["job_id"], r["owner"], ad, r["time"], priority=r.get("priority", 0), base_priority=r.get("priority", 0))
        job.history.append((r["time"], S.INSERTED.value, "submitted"))
        self.jobs[job.job_id] = job
        self._by_owner.setdefault(job.owner, set()).add(job.job_id)
        self._by_state[S.INSERTED].add(job.job_id)
        self.inserted_ever += 1
        self.next_job_id = max(self.next_job_id, job.job_id + 1)
        for lfn in job.inputs:
            self._by_input.setdefault(lfn, set()).add(job.job_id)

    def _apply_elaborate(self, r):
        job = self.jobs[r["job_id"]]
        job.elaborated_jdl = self._parsed(r["jdl"])
        if job.state == S.INSERTED:
            self._set_state(job, S.WAITING, r.get("note", "elaborated"), r["time"])
        else:
            job.history.append((r["time"], job.state.value, r.get("note", "re-elaborated")))

    def _apply_state(self, r):
        job = self.jobs[r["job_id"]]
        new = S(r["state"])
        t = r["time"]
        if new == S.ASSIGNED:
            job.assigned_ce = r["ce"]
            job.attempt = r["attempt"]
        if new == S.RUNNING and job.started is None:
            job.started = t
        if new == S.WAITING:
            job.assigned_ce = None
        if new in TERMINAL:
            job.ended = t
        if job.awaiting_validation:
            self.awaiting -= 1
        job.awaiting_validation = new == S.DONE and bool(r.get("awaiting_validation"))
        if job.awaiting_validation:
            self.awaiting += 1
        self._set_state(job, new, r.get("note", ""), t)
        job.last_heartbeat = t

    def _apply_priority(self, r):
        job = self.jobs[r["job_id"]]
        was_waiting = job.state == S.WAITING
        if was_waiting:
            self._waiting.discard((-job.priority, job.job_id))
        prio = r["priority"]
        job.priority = DEFERRED if prio is None else prio
        if "base" in r:
            job.base_priority = r["base"]
        if was_waiting and job.priority != DEFERRED:
            self._waiting.add((-job.priority, job.job_id))

    def _apply_transfer_submit(self, r):
        tr = TransferRequest(r["transfer_id"], r["lfn"], r["dest_se"], r["size"], r["requester"], r["time"])
        tr.history.append((r["time"], S.INSERTED.value, "requested"))
        tr.history.append((r["time"], S.WAITING.value, "queued"))
        tr.state = S.WAITING
        self.transfers[tr.transfer_id] = tr
        self._waiting_transfers.add(tr.transfer_id)
        self._active_transfers[(tr.lfn, tr.dest_se)] = tr.transfer_id
        self.next_transfer_id = max(self.next_transfer_id, tr.transfer_id + 1)

    def _apply_transfer_state(self, r):
        tr = self.transfers[r["transfer_id"]]
        new = S(r["state"])
        t = r["time"]
        if tr.state == S.WAITING:
            self._waiting_transfers.discard(tr.transfer_id)
        if new == S.ASSIGNED:
            tr.assigned_ftd = r["ftd"]
            tr.source_se = r["source_se"]
            tr.attempt = r["attempt"]
        if new == S.RUNNING and tr.started is None:
            tr.started = t
        if new == S.WAITING:
            tr.assigned_ftd = None
            self._waiting_transfers.add(tr.transfer_id)
        if new in TERMINAL:
            tr.ended = t
            self._active_transfers.pop((tr.lfn, tr.dest_se), None)
        tr.state = new
        tr.history.append((t, new.value, r.get("note", "")))
        tr.last_heartbeat = t

    def _apply_provenance(self, r):
        rec = ProvenanceRecord(**r["record"])
        self.provenance[rec.subject] = rec

    # ------------------------------------------------------------------ helpers

    def _job_owner(self, job_id: int) -> str | None:
        job = self.jobs.get(job_id)
        return job.owner if job else None

    def principal_for(self, user: str) -> Principal:
        """Service-side credential acting on behalf of ``user``."""
        spec = self.config.users.get(user)
        if spec is None:
            return Principal(user, (user,))
        return Principal(user, spec.groups or (user,), spec.roles)

    def job(self, job_id: int) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(str(job_id)) from None

    def transfer(self, tid: int) -> TransferRequest:
        try:
            return self.transfers[tid]
        except KeyError:
            raise NotFound(f"transfer {tid}") from None

    def count(self, state: JobState) -> int:
        return len(self._by_state[state])

    def counts(self) -> dict:
        return {s.value: len(ids) for s, ids in self._by_state.items() if ids}

    def ids_in(self, *states) -> list[int]:
        out = set()
        for st in states:
            out |= self._by_state[S(st)]
        return sorted(out)

    def waiting_jobs(self) -> list[Job]:
        return [self.jobs[j] for j in sorted(self._by_state[S.WAITING])]

    @property
    def unfinished(self) -> int:
        """Jobs not yet at their final state (DONE awaiting validation counts)."""
        return sum(len(self._by_state[st]) for st in ACTIVE) + self.awaiting

    @property
    def active_transfer_count(self) -> int:
        return len(self._active_transfers)

    def owners(self) -> list[str]:
        return sorted(self._by_owner)

    def jobs_of(self, user: str) -> set:
        return self._by_owner.get(user, set())

    def active_jobs_of(self, user: str) -> int:
        return sum(1 for j in self.jobs_of(user) if self.jobs[j].state in HELD)

    def held_count(self) -> int:
        return sum(len(self._by_state[st]) for st in HELD)

    def _policy(self, owner: str, job_ids=()):
        if self.policy is not None:
            self.policy.adjust(self, {owner}, list(job_ids))

    # ------------------------------------------------------------------ submission

    def submit(self, jdl_text: str, principal: Principal, priority: int = 0) -> int:
        with self._lock:
            principal.check(self.clock())
            ad = jdl.normalize_job_ad(jdl.parse(jdl_text) if isinstance(jdl_text, str) else jdl_text)
            errs = jdl.job_ad_errors(ad)
            if errs:
                raise ParseError("; ".join(errs))
            cmd = ad.value("Executable")
            if cmd not in self.config.commands:
                raise UnknownCommand(cmd)
            for ref in ad.value("Packages"):
                if not isinstance(ref, str) or not self.config.package_exists(ref):
                    raise UnknownPackage(str(ref))
            for ref in ad.value("InputData"):
                if not isinstance(ref, str):
                    raise ParseError(f"InputData entries must be strings, got {ref!r}")
                path = lfn_path(ref)
                entry = self.catalogue.lookup(path, principal)
                if entry.kind != "file":
                    raise NotFound(f"{path} is not a file")
            job_id = self.next_job_id
            t = self.clock()
            self._commit({"op": "submit", "job_id": job_id, "owner": principal.user, "jdl": self._remember(ad), "time": t, "priority": priority})
            self.catalogue.create_proc_dir(job_id, principal.user)
            self._emit("submit", job_id, f"owner={principal.user} exe={cmd}")
            self._policy(principal.user, [job_id])
            return job_id

    def data_clause(self, job: Job) -> jdl.Expr | None:
        """Conjunction over inputs of 'some CloseSE holds a replica'."""
        clause = None
        for path in job.inputs:
            entry = self.catalogue.lookup(path, ADMIN)
            ses = sorted({r.se_name for r in entry.replicas})
            if not ses:
                raise NotFound(f"{path} has no replicas")
            term = jdl.any_member("CloseSE", ses)
            clause = term if clause is None else jdl.conjoin(clause, term)
        return clause

    def elaborate(self, job_id: int) -> Job:
        """Add data-location requirements and move INSERTED -> WAITING."""
        with self._lock:
            job = self.job(job_id)
            if job.state not in (S.INSERTED, S.WAITING):
                raise IllegalTransition(f"job {job_id} is {job.state}, cannot elaborate")
            t = self.clock()
            try:
                clause = self.data_clause(job)
            except NotFound as exc:
                if job.state == S.INSERTED:
                    self._fail(job, f"elaboration: {exc.message}")
                return job
            ad = job.jdl.copy()
            if clause is not None:
                ad["Requirements"] = jdl.conjoin(job.jdl["Requirements"], clause)
            text = self._remember(ad)
            if job.elaborated_jdl is not None and job.state == S.WAITING and jdl.unparse(job.elaborated_jdl) == text:
                return job
            note = "elaborated" if job.state == S.INSERTED else "re-elaborated"
            self._commit({"op": "elaborate", "job_id": job_id, "jdl": text, "time": t, "note": note})
            if note == "elaborated":
                self._emit("job", job_id, "WAITING")
            self._policy(job.owner, [job_id])
            return job

    def elaborate_pending(self) -> int:
        with self._lock:
            ids = sorted(self._by_state[S.INSERTED])
            for j in ids:
                self.elaborate(j)
            return len(ids)

    # ------------------------------------------------------------------ the pull

    def choose_replicas(self, job: Job, close_se) -> dict:
        close = set(close_se)
        out = {}
        for path in job.inputs:
            try:
                reps = self.catalogue.lookup(path, ADMIN).replicas
            except NotFound:
                out[path] = None
                continue
            near = sorted((r for r in reps if r.se_name in close), key=lambda r: (r.se_name, r.path))
            far = sorted(reps, key=lambda r: (r.se_name, r.path))
            out[path] = (near or far or [None])[0]
        return out

    def eligible(self, job: Job, ce_ad: jdl.ClassAd) -> bool:
        ad = job.elaborated_jdl or job.jdl
        return jdl.matches(ad, ce_ad)

    def request_job(self, ce_ad: jdl.ClassAd):
        """A CE with a free slot asks for work.  Returns (job, replicas) or None."""
        with self._lock:
            name = ce_ad.value("Name")
            self.ce_ads[name] = ce_ad
            free = ce_ad.value("FreeSlots")
            if not isinstance(free, int) or isinstance(free, bool) or free < 1:
                return None
            for negp, jid in self._waiting:
                job = self.jobs[jid]
                if self.eligible(job, ce_ad):
                    break
            else:
                return None
            t = self.clock()
            self._commit({"op": "state", "job_id": jid, "state": S.ASSIGNED.value, "ce": name, "attempt": job.attempt + 1, "time": t, "note": f"assigned to {name}"})
            self._emit("job", jid, f"ASSIGNED ce={name} attempt={job.attempt}")
            self._policy(job.owner)
            return job, self.choose_replicas(job, ce_ad.value("CloseSE") or [])

    def heartbeat(self, agent: str, items) -> int:
        """Refresh liveness for (job_id, attempt) pairs held by ``agent``."""
        with self._lock:
            t = self.clock()
            n = 0
            for jid, attempt in items:
                job = self.jobs.get(jid)
                if job is not None and job.assigned_ce == agent and job.attempt == attempt and job.state in HELD:
                    job.last_heartbeat = t
                    n += 1
            return n

    def transfer_heartbeat(self, agent: str, tid: int, attempt: int) -> bool:
        with self._lock:
            tr = self.transfers.get(tid)
            if tr is not None and tr.assigned_ftd == agent and tr.attempt == attempt and tr.state in (S.ASSIGNED, S.RUNNING):
                tr.last_heartbeat = self.clock()
                return True
            return False

    def _check_reporter(self, job: Job, reporter, attempt):
        if isinstance(reporter, Principal):
            reporter.check(self.clock())
            if not reporter.is_admin:
                raise PermissionDenied(f"{reporter.user} may not report job states")
            return
        if job.assigned_ce != reporter or job.state not in HELD or (attempt is not None and attempt != job.attempt):
            raise StaleReport(f"job {job.job_id}: {reporter} (attempt {attempt}) does not hold it")

    def report_state(self, job_id: int, new_state, note: str = "", reporter=ADMIN, attempt: int | None = None):
        with self._lock:
            job = self.job(job_id)
            new = S(new_state)
            self._check_reporter(job, reporter, attempt)
            if not legal(job.state, new):
                raise IllegalTransition(f"job {job_id}: {job.state} -> {new}")
            if new == S.ASSIGNED:
                raise IllegalTransition(f"job {job_id}: assignment only happens when a CE pulls work")
            t = self.clock()
            rec = {"op": "state", "job_id": job_id, "state": new.value, "time": t, "note": note}
            needs_validation = False
            if new == S.DONE:
                needs_validation = self.config.commands[job.command].validation is not None
                rec["awaiting_validation"] = needs_validation
            self._commit(rec)
            self._emit("job", job_id, f"{new.value}" + (f" {note}" if note else ""))
            if new == S.FAILED:
                self.log.error("broker", f"job failed: {note or 'no reason given'}", job_id)
            if new == S.FAILED or (new == S.DONE and not needs_validation):
                self._write_provenance(job)
            if new in (S.FAILED, S.DONE):
                self._policy(job.owner)

    def _fail(self, job: Job, note: str):
        self._commit({"op": "state", "job_id": job.job_id, "state": S.FAILED.value, "time": self.clock(), "note": note})
        self._emit("job", job.job_id, f"FAILED {note}")
        self.log.error("broker", f"job failed: {note}", job.job_id)
        self._write_provenance(job)
        self._policy(job.owner)

    def kill(self, job_id: int, principal: Principal) -> str | None:
        """Fail a job on request; returns the CE that must be signalled, if any."""
        with self._lock:
            principal.check(self.clock())
            job = self.job(job_id)
            if not (principal.is_admin or principal.user == job.owner):
                raise PermissionDenied(f"{principal.user} cannot kill job {job_id}")
            if job.state in TERMINAL:
                raise Terminal(f"job {job_id} is {job.state}")
            ce = job.assigned_ce if job.state in HELD else None
            self._fail(job, f"killed by {principal.user}")
            return ce

    def mark_zombie(self, job_id: int, note: str = "heartbeat lost"):
        with self._lock:
            job = self.job(job_id)
            if job.state not in (S.ASSIGNED, S.RUNNING):
                raise IllegalTransition(f"job {job_id}: {job.state} -> ZOMBIE")
            t = self.clock()
            self._commit({"op": "state", "job_id": job_id, "state": S.ZOMBIE.value, "time": t, "note": note})
            self._emit("job", job_id, "ZOMBIE")
            self.log.warn("broker", note, job_id)
            self._commit({"op": "state", "job_id": job_id, "state": S.WAITING.value, "time": t, "note": "re-queued after zombie"})
            self._emit("job", job_id, "WAITING requeued")
            self._policy(job.owner, [job_id])

    def set_priority(self, job_id: int, priority: int, principal: Principal):
        with self._lock:
            principal.check(self.clock())
            if not principal.has_role("production", "admin"):
                raise PermissionDenied(f"{principal.user} lacks production/admin role")
            job = self.job(job_id)
            if job.state in TERMINAL:
                raise Terminal(f"job {job_id} is {job.state}")
            self._commit({"op": "priority", "job_id": job_id, "priority": int(priority), "base": int(priority), "time": self.clock()})
            self._policy(job.owner, [job_id])

    def adjust_priority(self, job_id: int, priority):
        """Policy-driven change of the effective priority (None/-inf defers)."""
        with self._lock:
            job = self.jobs[job_id]
            if priority == DEFERRED:
                priority = None
            cur = None if job.priority == DEFERRED else job.priority
            if cur == priority:
                return False
            self._commit({"op": "priority", "job_id": job_id, "priority": priority, "time": self.clock()})
            return True

    # ------------------------------------------------------------------ validation & provenance

    def _output_entries(self, job: Job) -> list[tuple[str, str]] | None:
        """(declared name, LFN under /proc) for every declared output, or None if one is missing."""
        proc = f"/proc/{job.job_id}"
        try:
            names = [e.name for e in self.catalogue.listdir(proc, ADMIN) if e.kind == "file"]
        except NotFound:
            return None
        found = []
        for pattern in job.list_attr("OutputFiles"):
            hits = sorted(n for n in names if fnmatch.fnmatchcase(n, pattern))
            if not hits:
                return None
            found.extend((n, posixpath.join(proc, n)) for n in hits)
        return found

    def final_dir(self, job: Job) -> str | None:
        d = job.jdl.value("OutputDir")
        return d.replace("{job_id}", str(job.job_id)) if isinstance(d, str) and d else None

    def validate(self, job_id: int) -> JobState:
        with self._lock:
            job = self.job(job_id)
            if job.state != S.DONE:
                if job.state == S.VALIDATED:
                    return job.state
                raise IllegalTransition(f"job {job_id} is {job.state}, not DONE")
            if not job.awaiting_validation:
                return job.state
            outputs = self._output_entries(job)
            if outputs is None:
                self._validation_failed(job, "declared output missing")
                return job.state
            for _, path in outputs:
                if self.catalogue.lookup(path, ADMIN).size <= 0:
                    self._validation_failed(job, f"empty output {posixpath.basename(path)}")
                    return job.state
            dest = self.final_dir(job)
            if dest is not None:
                try:
                    if not self.catalogue.exists(dest):
                        self.catalogue.mkdir(dest, ADMIN, owner=job.owner, parents=True)
                    for name, path in outputs:
                        self.catalogue.rename(path, posixpath.join(dest, name), ADMIN)
                except Exception as exc:  # noqa: BLE001 - any catalogue refusal fails the job
                    self._validation_failed(job, f"could not publish outputs: {exc}")
                    return job.state
            self._commit({"op": "state", "job_id": job_id, "state": S.VALIDATED.value, "time": self.clock(), "note": "validated"})
            self._emit("job", job_id, "VALIDATED")
            self._write_provenance(job)
            return job.state

    def _validation_failed(self, job: Job, note: str):
        self._commit({"op": "state", "job_id": job.job_id, "state": S.FAILED.value, "time": self.clock(), "note": f"validation: {note}"})
        self._emit("job", job.job_id, f"FAILED validation: {note}")
        self.log.error("validator", note, job.job_id)
        self._write_provenance(job)

    def output_lfns(self, job: Job) -> list[str]:
        if job.state == S.VALIDATED and self.final_dir(job):
            dest = self.final_dir(job)
            try:
                names = [e.name for e in self.catalogue.listdir(dest, ADMIN) if e.kind == "file"]
            except NotFound:
                return []
            pats = job.list_attr("OutputFiles")
            return [posixpath.join(dest, n) for n in names if any(fnmatch.fnmatchcase(n, p) for p in pats)]
        outs = self._output_entries(job) or []
        return [p for _, p in outs]

    def _write_provenance(self, job: Job):
        subject = f"job:{job.job_id}"
        if subject in self.provenance:
            return
        inputs = []
        for path in job.inputs:
            try:
                inputs.append([path, self.catalogue.lookup(path, ADMIN).file_id.hex])
            except NotFound:
                inputs.append([path, None])
        outputs = []
        if job.state != S.FAILED:
            for path in self.output_lfns(job):
                outputs.append([path, self.catalogue.lookup(path, ADMIN).file_id.hex])
        cmd = self.config.commands.get(job.command)
        try:
            refs = list(job.list_attr("Packages")) + (list(cmd.depends) if cmd else [])
            packages = [s.ref for s in self.resolver.resolve(refs)]
        except Exception:  # noqa: BLE001 - provenance is best effort for broken package sets
            packages = []
        rec = ProvenanceRecord(
            subject, inputs, f"{job.command}::{cmd.version if cmd else '?'}", packages, outputs,
            job.assigned_ce or (job.history and self._last_ce(job)), job.submitted, job.started, job.ended, job.state.value,
        )
        self._commit({"op": "provenance", "record": rec.to_dict()})

    def _last_ce(self, job: Job):
        for _, state, note in reversed(job.history):
            if state == S.ASSIGNED.value and note.startswith("assigned to "):
                return note[len("assigned to ") :]
        return None

    # ------------------------------------------------------------------ transfers

    def submit_transfer(self, lfn: str, dest_se: str, requester: str = "optimizer") -> int:
        with self._lock:
            path = lfn_path(lfn)
            entry = self.catalogue.lookup(path, ADMIN)
            if entry.kind != "file" or not entry.replicas:
                raise NotFound(f"{path} has no replica to copy")
            if dest_se not in self.storage:
                raise UnknownSE(dest_se)
            if any(r.se_name == dest_se for r in entry.replicas):
                raise AlreadyReplicated(f"{path} already at {dest_se}")
            pending = self.pending_transfer(path, dest_se)
            if pending is not None:
                return pending
            if self.storage[dest_se].available() < entry.size:
                raise InsufficientSpace(f"{dest_se} cannot hold {entry.size} bytes")
            tid = self.next_transfer_id
            self._commit({"op": "transfer_submit", "transfer_id": tid, "lfn": path, "dest_se": dest_se, "size": entry.size, "requester": requester, "time": self.clock()})
            self._emit("transfer", tid, f"WAITING {path} -> {dest_se}")
            return tid

    def pending_transfer(self, lfn: str, dest_se: str) -> int | None:
        return self._active_transfers.get((lfn, dest_se))

    def request_transfer(self, ftd_ad: jdl.ClassAd) -> TransferRequest | None:
        with self._lock:
            name = ftd_ad.value("Name")
            serves = set(x for x in (ftd_ad.value("Serves") or []) if isinstance(x, str))
            for tid in self._waiting_transfers:
                tr = self.transfers[tid]
                try:
                    reps = self.catalogue.lookup(tr.lfn, ADMIN).replicas
                except NotFound:
                    continue
                sources = sorted({r.se_name for r in reps} - {tr.dest_se})
                if not sources:
                    continue
                if tr.dest_se in serves or serves.intersection(sources):
                    break
            else:
                return None
            local = [s for s in sources if s in serves]
            source = (local or sources)[0]
            self._commit({"op": "transfer_state", "transfer_id": tid, "state": S.ASSIGNED.value, "ftd": name, "source_se": source, "attempt": tr.attempt + 1, "time": self.clock(), "note": f"assigned to {name}"})
            self._emit("transfer", tid, f"ASSIGNED ftd={name} source={source}")
            return tr

    def report_transfer(self, tid: int, new_state, note: str = "", reporter=ADMIN, attempt: int | None = None):
        with self._lock:
            tr = self.transfer(tid)
            new = S(new_state)
            if isinstance(reporter, Principal):
                if not reporter.is_admin:
                    raise PermissionDenied(f"{reporter.user} may not report transfer states")
            elif tr.assigned_ftd != reporter or tr.state not in (S.ASSIGNED, S.RUNNING) or (attempt is not None and attempt != tr.attempt):
                raise StaleReport(f"transfer {tid}: {reporter} does not hold it")
            if not legal(tr.state, new, TRANSFER_TRANSITIONS):
                raise IllegalTransition(f"transfer {tid}: {tr.state} -> {new}")
            self._commit({"op": "transfer_state", "transfer_id": tid, "state": new.value, "time": self.clock(), "note": note})
            self._emit("transfer", tid, new.value + (f" {note}" if note else ""))
            if new == S.FAILED:
                self.log.error("ftbroker", f"transfer failed: {note}", f"transfer:{tid}")
            if new in TERMINAL:
                self._transfer_provenance(tr)
            if new == S.DONE:
                for jid in sorted(self._by_input.get(tr.lfn, ())):
                    if self.jobs[jid].state == S.WAITING:
                        self.elaborate(jid)

    def mark_transfer_zombie(self, tid: int):
        with self._lock:
            tr = self.transfer(tid)
            t = self.clock()
            self._commit({"op": "transfer_state", "transfer_id": tid, "state": S.ZOMBIE.value, "time": t, "note": "heartbeat lost"})
            self._commit({"op": "transfer_state", "transfer_id": tid, "state": S.WAITING.value, "time": t, "note": "re-queued after zombie"})
            self._emit("transfer", tid, "WAITING requeued")
            self.log.warn("ftbroker", "transfer heartbeat lost", f"transfer:{tid}")

    def _transfer_provenance(self, tr: TransferRequest):
        subject = f"transfer:{tr.transfer_id}"
        if subject in self.provenance:
            return
        try:
            fid = self.catalogue.lookup(tr.lfn, ADMIN).file_id.hex
        except NotFound:
            fid = None
        rec = ProvenanceRecord(
            subject, [[tr.lfn, fid]], "transfer::1", [],
            [[tr.lfn, fid]] if tr.state == S.DONE else [], tr.assigned_ftd, tr.submitted, tr.started, tr.ended, tr.state.value,
        )
        self._commit({"op": "provenance", "record": rec.to_dict()})

    # ------------------------------------------------------------------ views

    def dump(self, include_terminal: bool = True) -> str:
        """One job per line: id state priority owner assigned_ce."""
        lines = []
        for jid in sorted(self.jobs):
            j = self.jobs[jid]
            if not include_terminal and j.state in TERMINAL:
                continue
            prio = "-inf" if j.priority == DEFERRED else str(int(j.priority))
            lines.append(f"{jid} {j.state.value} {prio} {j.owner} {j.assigned_ce or '-'}")
        return "".join(line + "\n" for line in lines)

    def job_rows(self) -> list[dict]:
        return [
            {
                "id": j.job_id,
                "state": j.state.value,
                "priority": None if j.priority == DEFERRED else int(j.priority),
                "owner": j.owner,
                "assigned_ce": j.assigned_ce,
            }
            for j in (self.jobs[k] for k in sorted(self.jobs))
        ]

    def state_digest(self) -> dict:
        """Durable state in comparable form (used to check replay equivalence)."""
        return {
            "jobs": {
                jid: (j.owner, j.state.value, None if j.priority == DEFERRED else j.priority, j.base_priority, j.assigned_ce, j.attempt,
                      [tuple(h) for h in j.history], jdl.unparse(j.elaborated_jdl) if j.elaborated_jdl else None)
                for jid, j in sorted(self.jobs.items())
            },
            "transfers": {
                tid: (t.lfn, t.dest_se, t.state.value, t.source_se, t.assigned_ftd, t.attempt, [tuple(h) for h in t.history])
                for tid, t in sorted(self.transfers.items())
            },
            "provenance": {k: v.to_dict() for k, v in sorted(self.provenance.items())},
        }

    @classmethod
    def restore(cls, catalogue, config, records, journal: Journal | None = None, **kw) -> "Broker":
        b = cls(catalogue, config, journal=journal, **kw)
        for r in records:
            b._apply(r)
        now = b.clock()
        for j in b.jobs.values():
            j.last_heartbeat = now
        for t in b.transfers.values():
            t.last_heartbeat = now
        return b
