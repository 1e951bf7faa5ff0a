"""Site agents: the computing-element agent, its batch adapters and the transfer daemon.

Agents run inside a simulation runtime ``rt`` that provides ``clock``,
``bus``, ``grid``, ``ep(name)``, ``central(src, fn)``, ``trace(...)`` and a
``metrics`` object.  Every interaction with the central services goes
through ``rt.central`` and can therefore fail with :class:`Unreachable`;
reports that cannot be delivered wait in an outbox and are retried.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .. import jdl
from ..auth import ADMIN
from ..broker import Job, JobState, TransferRequest
from ..catalogue import PhysicalLocation
from ..config import CESpec
from ..errors import (
    AlreadyExists,
    GridError,
    IllegalTransition,
    InsufficientSpace,
    NotFound,
    ServiceDown,
    StaleReport,
)
from .execution import Outcome, run_command
from .storage import CACHE, Blob


class BatchRefused(GridError):
    kind = "BatchRefused"


# ---------------------------------------------------------------------------- batch adapters


class BatchAdapter:
    """Local batch system behind a CE; ``submit`` starts ``start_fn`` eventually."""

    name = "immediate"

    def __init__(self, slots: int):
        self.slots = slots

    def translate(self, job: Job) -> str:
        """Batch ticket for ``job`` in this system's own syntax."""
        return f"{self.name}:{job.job_id}.{job.attempt}:{job.command}"

    def submit(self, ticket, start_fn, clock):
        clock.schedule(0, start_fn)

    def release(self, clock):
        pass

    def reset(self):
        pass


class FifoBatch(BatchAdapter):
    """Runs at most ``slots`` tickets at once, in submission order."""

    name = "fifo"

    def __init__(self, slots: int):
        super().__init__(slots)
        self.queue = deque()
        self.running = 0

    def submit(self, ticket, start_fn, clock):
        self.queue.append(start_fn)
        self._drain(clock)

    def _drain(self, clock):
        while self.queue and self.running < self.slots:
            self.running += 1
            clock.schedule(0, self.queue.popleft())

    def release(self, clock):
        self.running = max(0, self.running - 1)
        self._drain(clock)

    def reset(self):
        self.queue.clear()
        self.running = 0


class FailingBatch(BatchAdapter):
    """Refuses every ``every``-th submission (to exercise the failure path)."""

    name = "fail-injecting"

    def __init__(self, slots: int, every: int = 2):
        super().__init__(slots)
        self.every = max(1, every)
        self.count = 0

    def submit(self, ticket, start_fn, clock):
        self.count += 1
        if self.count % self.every == 0:
            raise BatchRefused(f"batch system refused ticket {ticket}")
        clock.schedule(0, start_fn)


def make_batch(kind: str, slots: int, **kw) -> BatchAdapter:
    if kind in ("immediate", None):
        return BatchAdapter(slots)
    if kind == "fifo":
        return FifoBatch(slots)
    if kind in ("fail-injecting", "failing"):
        return FailingBatch(slots, **kw)
    raise ValueError(f"unknown batch adapter {kind!r}")


# ---------------------------------------------------------------------------- CE agent


@dataclass
class ProcessMonitor:
    """One running job on a worker node."""

    job_id: int
    attempt: int
    owner: str
    started: float
    outputs: list = field(default_factory=list)
    stdout: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    event: object = None
    outcome: Outcome | None = None

    def out(self, line: str):
        self.stdout.append(line)

    def err(self, line: str):
        self.stderr.append(line)


class ComputingElementAgent:
    def __init__(self, rt, spec: CESpec, poll_interval: float = 30.0, batch: str = "immediate",
                 batch_options: dict | None = None, offset: float = 0.0):
        self.rt = rt
        self.spec = spec
        self.name = spec.name
        self.endpoint = rt.ep(spec.name)
        self.poll_interval = poll_interval
        self.batch = make_batch(batch, spec.max_slots, **(batch_options or {}))
        self.offset = offset
        self.running: dict[int, ProcessMonitor] = {}
        self.outbox: deque = deque()
        self.alive = True
        self.generation = 0
        self.busy_time = 0.0
        self.completed = 0
        self._timers = {}

    # -- lifecycle

    def start(self):
        gen = self.generation
        self._timers = {
            "poll": self.rt.clock.schedule(self.offset, self._poll_loop, gen),
            "hb": self.rt.clock.schedule(self.offset + self.rt.heartbeat, self._heartbeat_loop, gen),
        }

    def crash(self):
        if not self.alive:
            return
        now = self.rt.clock.now
        for pm in self.running.values():
            self.busy_time += now - pm.started
            if pm.event is not None:
                pm.event.cancel()
        self.running.clear()
        self.outbox.clear()
        self.batch.reset()
        for t in self._timers.values():
            t.cancel()
        self.alive = False
        self.rt.bus.set_up(self.endpoint, False)

    def restart(self):
        if self.alive:
            return
        self.alive = True
        self.generation += 1
        self.rt.bus.set_up(self.endpoint, True)
        self.offset = 0.0
        self.start()

    @property
    def used(self) -> int:
        return len(self.running)

    @property
    def free(self) -> int:
        return max(0, self.spec.max_slots - self.used) if self.alive else 0

    def ad(self) -> jdl.ClassAd:
        repo = self.rt.grid.repos.get(self.spec.site)
        return jdl.resource_ad(
            self.name, self.spec.site, self.spec.platform, self.free, self.spec.max_slots,
            repo.refs() if repo else (), self.spec.close_se, self.spec.partition, self.spec.requirements,
        )

    # -- the pull

    def _poll_loop(self, gen):
        if gen != self.generation or not self.alive:
            return
        self.poll()
        self._timers["poll"] = self.rt.clock.schedule(self.poll_interval, self._poll_loop, gen)

    def poll(self):
        if not self.alive:
            return
        if not self.flush():
            return
        while self.free > 0:
            ad = self.ad()
            try:
                got = self.rt.central(self.endpoint, lambda b: b.request_job(ad))
            except ServiceDown:
                return
            if got is None:
                return
            job, replicas = got
            self.launch(job, replicas)

    def _heartbeat_loop(self, gen):
        if gen != self.generation or not self.alive:
            return
        self.flush()
        items = [(jid, pm.attempt) for jid, pm in sorted(self.running.items())]
        items += [(it[1], it[2]) for it in self.outbox if it[1] not in self.running]
        if items:
            try:
                self.rt.central(self.endpoint, lambda b: b.heartbeat(self.name, items))
                self.rt.metrics.heartbeats += 1
            except ServiceDown:
                pass
        self._timers["hb"] = self.rt.clock.schedule(self.rt.heartbeat, self._heartbeat_loop, gen)

    # -- reporting

    def report(self, job_id: int, attempt: int, state: str, note: str = ""):
        self.outbox.append(("report", job_id, attempt, state, note))
        self.flush()

    def flush(self) -> bool:
        """Deliver queued reports in order; False if central services are unreachable."""
        while self.outbox:
            item = self.outbox[0]
            try:
                if item[0] == "report":
                    _, jid, attempt, state, note = item
                    self.rt.central(self.endpoint, lambda b: b.report_state(jid, state, note, reporter=self.name, attempt=attempt))
                else:
                    self._save(item[1], item[2], item[3])
            except ServiceDown:
                return False
            except (StaleReport, IllegalTransition) as exc:
                self.rt.trace("stale", f"{self.name}", f"job {item[1]}: {exc.kind}")
                self.rt.metrics.stale_reports += 1
            self.outbox.popleft()
        return True

    def _fail(self, job_id: int, attempt: int, note: str):
        pm = self.running.pop(job_id, None)
        if pm is not None:
            self.busy_time += self.rt.clock.now - pm.started
        self.report(job_id, attempt, "FAILED", note)

    # -- running a job

    def launch(self, job: Job, replicas: dict):
        rt = self.rt
        now = rt.clock.now
        jid, attempt = job.job_id, job.attempt
        pm = ProcessMonitor(jid, attempt, job.owner, now)
        self.running[jid] = pm
        cmd = rt.grid.config.commands[job.command]
        try:
            plan = rt.grid.resolver.resolve(list(job.list_attr("Packages")) + list(cmd.depends))
            for spec in rt.grid.repos[self.spec.site].install(plan):
                rt.trace("install", self.name, spec.ref)
                pm.out(f"installed {spec.ref}")
        except GridError as exc:
            return self._fail(jid, attempt, f"package install: {exc}")
        digests = []
        for lfn in job.inputs:
            loc = replicas.get(lfn)
            if loc is None:
                return self._fail(jid, attempt, f"stage-in: no replica of {lfn}")
            try:
                blob = self.stage_in(loc)
            except GridError as exc:
                return self._fail(jid, attempt, f"stage-in {lfn}: {exc}")
            digests.append(blob.digest)
        pm.outcome = run_command(cmd, job.jdl.value("Arguments") or [], digests, f"{jid}:{attempt}")
        gen = self.generation

        def begin():
            if gen != self.generation or self.running.get(jid) is not pm:
                return
            self.report(jid, attempt, "RUNNING")
            pm.event = rt.clock.schedule(pm.outcome.duration, self._finish, jid, pm, gen)

        try:
            self.batch.submit(self.batch.translate(job), begin, rt.clock)
        except BatchRefused as exc:
            self._fail(jid, attempt, str(exc))

    def stage_in(self, loc: PhysicalLocation) -> Blob:
        rt = self.rt
        if not rt.bus.reachable(self.endpoint, rt.ep(loc.se_name)):
            raise ServiceDown(f"{loc.se_name} unreachable from {self.name}")
        blob = rt.grid.storage[loc.se_name].fetch(loc.path)
        close = [s for s in self.spec.close_se if s in rt.grid.storage]
        if close and loc.se_name not in close:
            cache = rt.grid.storage[close[0]]
            try:
                cache.store(f"/cache{loc.path}", blob, CACHE)
            except InsufficientSpace:
                pass
            rt.metrics.bytes_staged += blob.size
        return blob

    def _finish(self, jid: int, pm: ProcessMonitor, gen: int):
        if gen != self.generation or self.running.get(jid) is not pm:
            return
        del self.running[jid]
        self.busy_time += self.rt.clock.now - pm.started
        self.completed += 1
        self.batch.release(self.rt.clock)
        out = pm.outcome
        pm.out(out.stdout)
        if out.stderr:
            pm.err(out.stderr)
        if not out.ok:
            self.report(jid, pm.attempt, "FAILED", out.stderr)
        else:
            self.outbox.append(("save", jid, pm.attempt, pm))
            self.flush()
        self.rt.clock.schedule(0, self._kick, gen)

    def _kick(self, gen):
        if gen == self.generation:
            self.poll()

    def _save(self, jid: int, attempt: int, pm: ProcessMonitor):
        """SAVING: write outputs to the close SE, register them under /proc, then DONE."""
        rt = self.rt
        job = rt.central(self.endpoint, lambda b: b.jobs.get(jid))
        if job is None or job.assigned_ce != self.name or job.attempt != attempt:
            raise StaleReport(f"job {jid} no longer held by {self.name}")
        if job.state == JobState.RUNNING:
            rt.central(self.endpoint, lambda b: b.report_state(jid, "SAVING", "", reporter=self.name, attempt=attempt))
        se_name = next((s for s in self.spec.close_se if s in rt.grid.storage), None)
        try:
            if se_name is None:
                raise NotFound(f"{self.name} has no close storage element")
            files = dict(pm.outcome.outputs)
            files["stdout"] = Blob.of("".join(pm.stdout).encode())
            if pm.stderr:
                files["stderr"] = Blob.of("".join(pm.stderr).encode())
            self.publish(jid, pm.owner, files, se_name)
        except GridError as exc:
            rt.central(self.endpoint, lambda b: b.report_state(jid, "FAILED", f"saving: {exc}", reporter=self.name, attempt=attempt))
            return
        rt.central(self.endpoint, lambda b: b.report_state(jid, "DONE", "", reporter=self.name, attempt=attempt))

    def publish(self, jid: int, owner: str, files: dict, se_name: str):
        rt = self.rt
        se = rt.grid.storage[se_name]
        cat = rt.grid.catalogue
        who = rt.grid.principal(owner)
        for name in sorted(files):
            blob = files[name]
            path = f"/proc/{jid}/{name}"
            se.store(path, blob)
            if cat.exists(path):
                cat.remove(path, ADMIN)
            cat.register_file(path, PhysicalLocation(se_name, se.protocol, path), blob.size, who)
            rt.metrics.bytes_written += blob.size

    def kill(self, job_id: int):
        pm = self.running.pop(job_id, None)
        if pm is None:
            return False
        if pm.event is not None:
            pm.event.cancel()
        self.busy_time += self.rt.clock.now - pm.started
        self.batch.release(self.rt.clock)
        self.rt.trace("kill", self.name, f"job {job_id}")
        return True


# ---------------------------------------------------------------------------- transfer daemon


class FtdAgent:
    """File transfer daemon serving a set of storage elements."""

    def __init__(self, rt, name: str, site: str, serves, bandwidth: float = 1e8, poll_interval: float = 30.0, offset: float = 0.0):
        self.rt = rt
        self.name = name
        self.site = site
        self.serves = tuple(serves)
        self.endpoint = rt.ep(name)
        self.bandwidth = bandwidth
        self.poll_interval = poll_interval
        self.offset = offset
        self.active: dict[int, tuple] = {}  # tid -> (attempt, event)
        self.alive = True
        self.generation = 0
        self._timers = {}

    def ad(self) -> jdl.ClassAd:
        return jdl.ClassAd({"Name": self.name, "Site": self.site, "Serves": list(self.serves)})

    def start(self):
        gen = self.generation
        self._timers = {
            "poll": self.rt.clock.schedule(self.offset, self._poll_loop, gen),
            "hb": self.rt.clock.schedule(self.offset + self.rt.heartbeat, self._heartbeat_loop, gen),
        }

    def crash(self):
        if not self.alive:
            return
        for _, ev in self.active.values():
            if ev is not None:
                ev.cancel()
        self.active.clear()
        for t in self._timers.values():
            t.cancel()
        self.alive = False
        self.rt.bus.set_up(self.endpoint, False)

    def restart(self):
        if self.alive:
            return
        self.alive = True
        self.generation += 1
        self.rt.bus.set_up(self.endpoint, True)
        self.offset = 0.0
        self.start()

    def _poll_loop(self, gen):
        if gen != self.generation:
            return
        self.poll()
        self._timers["poll"] = self.rt.clock.schedule(self.poll_interval, self._poll_loop, gen)

    def _heartbeat_loop(self, gen):
        if gen != self.generation:
            return
        for tid, (attempt, _) in sorted(self.active.items()):
            try:
                self.rt.central(self.endpoint, lambda b: b.transfer_heartbeat(self.name, tid, attempt))
            except ServiceDown:
                break
        self._timers["hb"] = self.rt.clock.schedule(self.rt.heartbeat, self._heartbeat_loop, gen)

    def poll(self):
        if not self.alive or self.active:
            return
        ad = self.ad()
        try:
            tr = self.rt.central(self.endpoint, lambda b: b.request_transfer(ad))
        except ServiceDown:
            return
        if tr is None:
            return
        self.begin(tr)

    def _report(self, tid, attempt, state, note=""):
        try:
            self.rt.central(self.endpoint, lambda b: b.report_transfer(tid, state, note, reporter=self.name, attempt=attempt))
            return True
        except ServiceDown:
            return False
        except (StaleReport, IllegalTransition):
            self.rt.metrics.stale_reports += 1
            return False

    def begin(self, tr: TransferRequest):
        tid, attempt = tr.transfer_id, tr.attempt
        if not self._report(tid, attempt, "RUNNING"):
            return
        duration = tr.size / self.bandwidth if self.bandwidth > 0 else 0.0
        ev = self.rt.clock.schedule(duration, self._complete, tid, attempt, tr.lfn, tr.source_se, tr.dest_se, self.generation)
        self.active[tid] = (attempt, ev)

    def _complete(self, tid, attempt, lfn, source, dest, gen):
        if gen != self.generation or tid not in self.active:
            return
        del self.active[tid]
        rt = self.rt
        try:
            for se in (source, dest):
                if not rt.bus.reachable(self.endpoint, rt.ep(se)):
                    raise ServiceDown(f"{se} unreachable")
            entry = rt.grid.catalogue.lookup(lfn, ADMIN)
            rep = next(r for r in entry.replicas if r.se_name == source)
            blob = rt.grid.storage[source].fetch(rep.path)
            dst = rt.grid.storage[dest]
            dst.store(rep.path, blob)
            if dst.digest_of(rep.path) != blob.digest:
                raise GridError("copy corrupted")
            rt.central(self.endpoint, lambda b: b.catalogue.add_replica(lfn, PhysicalLocation(dest, dst.protocol, rep.path), ADMIN))
        except (GridError, StopIteration, AlreadyExists) as exc:
            self._report(tid, attempt, "FAILED", f"copy {source} -> {dest}: {exc}")
        else:
            rt.metrics.bytes_transferred += blob.size
            self._report(tid, attempt, "DONE")
        self.poll()


def ce_poll_cycle(agent: ComputingElementAgent):
    agent.poll()


def ftd_cycle(agent: FtdAgent):
    agent.poll()


def gateway_route(bus, site: str, message):
    """Hand ``message`` to the gateway of ``site`` and return its response."""
    return bus.gateways[site].route(message)
