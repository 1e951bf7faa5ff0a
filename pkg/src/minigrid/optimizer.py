"""Background passes over the task and transfer queues."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import jdl
from .auth import ADMIN
from .broker import DEFERRED, HELD, Broker, Job, JobState
from .config import PolicyRules
from .errors import AlreadyReplicated, GridError, NotFound
from .logger import EventLog, LogEvent

__all__ = [
    "EventLog",
    "JobOptimizer",
    "LogEvent",
    "OptimizerPass",
    "PolicyMonitor",
    "ZombieReaper",
    "classify_blocked",
    "log",
    "query_log",
]

S = JobState


@dataclass
class OptimizerPass:
    kind: str
    interval: float = 60.0
    stats: dict = field(default_factory=dict)

    def bump(self, key: str, n: int = 1):
        self.stats[key] = self.stats.get(key, 0) + n


def classify_blocked(broker: Broker, ce_ads) -> dict[int, str]:
    """WAITING jobs that no CE takes: 'data' if only data clauses block them, else 'other'."""
    out = {}
    ads = list(ce_ads)
    for job in broker.waiting_jobs():
        full = job.elaborated_jdl or job.jdl
        if any(jdl.matches(full, ad) for ad in ads):
            continue
        stripped = any(jdl.matches(job.jdl, ad) for ad in ads)
        out[job.job_id] = "data" if stripped else "other"
    return out


class JobOptimizer(OptimizerPass):
    """Replicates input data so that data-starved jobs become eligible somewhere."""

    def __init__(self, interval: float = 60.0):
        super().__init__("job", interval)
        self._warned: set = set()

    def run(self, broker: Broker, ce_ads=None) -> list:
        ads = dict(broker.ce_ads if ce_ads is None else ce_ads)
        actions = []
        broker.elaborate_pending()
        blocked = classify_blocked(broker, ads.values())
        for jid in sorted(blocked):
            job = broker.jobs[jid]
            if blocked[jid] == "other":
                if jid not in self._warned:
                    self._warned.add(jid)
                    broker.log.warn("job-optimizer", "no computing element can ever match this job", jid)
                    self.bump("unmatchable")
                continue
            candidates = [ad for ad in ads.values() if jdl.matches(job.jdl, ad)]

            def free(ad):
                v = ad.value("FreeSlots")
                return v if isinstance(v, int) else 0

            candidates.sort(key=lambda ad: (-free(ad), str(ad.value("Name"))))
            target = candidates[0]
            close = [s for s in (target.value("CloseSE") or []) if isinstance(s, str) and s in broker.storage]
            if not close:
                continue
            for path in job.inputs:
                try:
                    reps = broker.catalogue.lookup(path, ADMIN).replicas
                except NotFound:
                    continue
                if any(r.se_name in close for r in reps):
                    continue
                if broker.pending_transfer(path, close[0]) is not None:
                    continue
                try:
                    tid = broker.submit_transfer(path, close[0], requester="optimizer")
                except AlreadyReplicated:
                    continue
                except GridError as exc:
                    broker.log.warn("job-optimizer", f"cannot replicate {path}: {exc}", jid)
                    continue
                actions.append(("transfer", tid, path, close[0], jid))
                self.bump("transfers")
        return actions


class ZombieReaper(OptimizerPass):
    """Re-queues jobs and transfers whose holder stopped sending heartbeats."""

    def __init__(self, heartbeat: float = 60.0, missed: int = 3, interval: float | None = None):
        super().__init__("zombie", heartbeat if interval is None else interval)
        self.heartbeat = heartbeat
        self.missed = missed

    @property
    def window(self) -> float:
        return self.heartbeat * self.missed

    def run(self, broker: Broker, now: float | None = None) -> list:
        now = broker.clock() if now is None else now
        actions = []
        for jid in broker.ids_in(S.ASSIGNED, S.RUNNING):
            job = broker.jobs[jid]
            if now - job.last_heartbeat >= self.window:
                broker.mark_zombie(jid, f"{self.missed} heartbeats missed from {job.assigned_ce}")
                actions.append(("requeue", jid))
                self.bump("jobs")
        for tid in sorted(broker.transfers):
            tr = broker.transfers[tid]
            if tr.state in (S.ASSIGNED, S.RUNNING) and now - tr.last_heartbeat >= self.window:
                broker.mark_transfer_zombie(tid)
                actions.append(("requeue-transfer", tid))
                self.bump("transfers")
        return actions


class PolicyMonitor(OptimizerPass):
    """Role-based priority boosts and per-user caps on concurrently held jobs.

    The effective priority of a WAITING job is its base priority plus the
    largest boost among its owner's roles, or deferred (never assigned) when
    the owner already holds ``cap`` jobs.
    """

    def __init__(self, rules: PolicyRules, roles_of=None, interval: float = 60.0):
        super().__init__("policy", interval)
        self.boost = dict(rules.role_boost)
        self.caps = dict(rules.user_caps)
        self.roles_of = roles_of or (lambda user: ())

    def _target(self, job: Job, held: dict, rank: dict) -> float:
        cap = self.caps.get(job.owner)
        if cap is not None and rank.get(job.job_id, 0) >= cap - held.get(job.owner, 0):
            return DEFERRED
        boosts = [self.boost[r] for r in self.roles_of(job.owner) if r in self.boost]
        return job.base_priority + (max(boosts) if boosts else 0)

    def adjust(self, broker: Broker, users=None, job_ids=None) -> list:
        """Recompute effective priorities.

        For owners without a cap only ``job_ids`` (default: all their jobs)
        are touched; capped owners are always recomputed in full since their
        held count moves every deferral.
        """
        if not self.boost and not self.caps:
            return []
        owners = sorted(broker.owners() if users is None else users)
        actions = []
        for owner in owners:
            ids = broker.jobs_of(owner)
            if owner not in self.caps:
                held, rank = {}, {}
                pick = ids if job_ids is None else [j for j in job_ids if j in ids]
                jobs = [broker.jobs[j] for j in sorted(pick)]
            else:
                jobs = [broker.jobs[j] for j in ids]
                held = {owner: sum(1 for j in jobs if j.state in HELD)}
                jobs.sort(key=lambda j: (-j.base_priority, j.job_id))
                jobs = [j for j in jobs if j.state in (S.WAITING, S.INSERTED)]
                rank = {j.job_id: i for i, j in enumerate(jobs)}
            for job in jobs:
                if job.state not in (S.WAITING, S.INSERTED):
                    continue
                target = self._target(job, held, rank)
                if broker.adjust_priority(job.job_id, target):
                    actions.append(("priority", job.job_id, target))
                    self.bump("changes")
        return actions

    def run(self, broker: Broker) -> list:
        return self.adjust(broker, None)


def log(event_log: EventLog, source: str, severity: str, message: str, subject="-") -> LogEvent:
    return event_log.log(source, severity, message, subject)


def query_log(event_log: EventLog, **filters) -> list[LogEvent]:
    return event_log.query(**filters)
