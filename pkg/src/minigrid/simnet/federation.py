"""A whole grid presented to another grid as one computing element plus one storage element.

The gateway pulls work from the outer broker like any CE.  Each accepted
job has its inputs copied into the inner grid and is resubmitted to the
inner broker under a mapped user.  When the inner job reaches its final
state, the declared outputs are copied to the gateway's virtual SE and
registered under the outer job's ``/proc`` directory, after which the outer
job proceeds through SAVING and DONE exactly as for a local CE.
"""

from __future__ import annotations

import posixpath

from .. import jdl
from ..auth import ADMIN
from ..broker import JobState
from ..catalogue import PhysicalLocation
from ..config import CESpec
from ..errors import GridError, InsufficientSpace, NameClash, ServiceDown
from ..site.agents import ComputingElementAgent, ProcessMonitor
from ..site.execution import Outcome
from ..site.storage import StorageElement
from .runtime import GridRuntime
from .scenario import FederationDecl


class FederationGateway(ComputingElementAgent):
    def __init__(self, outer: GridRuntime, inner: GridRuntime, decl: FederationDecl):
        og = outer.grid
        taken = set(og.config.computing_elements) | set(outer.agents) | set(og.storage)
        for name in (decl.name, decl.virtual_se):
            if name in taken or outer.bus.endpoints.get(outer.ep(name)) is not None:
                raise NameClash(f"{name} already exists in grid {og.name}")
        if decl.name == decl.virtual_se:
            raise NameClash(f"gateway and virtual SE share the name {decl.name}")
        super().__init__(outer, CESpec(decl.name, decl.site, 0, (decl.virtual_se,)), poll_interval=decl.poll_interval)
        self.inner = inner
        self.decl = decl
        self.user = decl.user
        self.vse = StorageElement(decl.virtual_se, decl.capacity, decl.site)
        og.add_storage(self.vse)
        bus = outer.bus
        bus.add_site(outer.site(decl.site))
        bus.register(self.endpoint, outer.site(decl.site), "federation-ce")
        bus.register(outer.ep(decl.virtual_se), outer.site(decl.site), "federation-se")
        self.inner_endpoint = inner.ep(f"federation:{decl.name}")
        bus.add_site(inner.site(decl.site))
        bus.register(self.inner_endpoint, inner.site(decl.site), "federation-client")
        self.outer_of: dict[int, tuple] = {}  # inner job id -> (outer job id, attempt, monitor)
        self.inner_of: dict[int, int] = {}
        inner.grid.listeners.append(self._inner_event)
        outer.agents[decl.name] = self

    # -- capacity as seen from outside

    def capacity(self) -> int:
        return self.inner.capacity()

    @property
    def free(self) -> int:
        if not self.alive or not self.inner.grid.broker_up:
            return 0
        return max(0, self.capacity() - self.inner.grid.broker.unfinished)

    def ad(self) -> jdl.ClassAd:
        return jdl.resource_ad(self.name, self.spec.site, "linux", self.free, self.capacity(), (), self.spec.close_se)

    def crash(self):
        super().crash()
        self.rt.bus.set_up(self.inner_endpoint, False)

    def restart(self):
        super().restart()
        self.rt.bus.set_up(self.inner_endpoint, True)

    # -- forwarding

    def _inner_call(self, fn):
        return self.inner.central(self.inner_endpoint, fn)

    def _pick_inner_se(self, size: int) -> str:
        for name in sorted(self.inner.grid.storage):
            if self.inner.grid.storage[name].available() >= size:
                return name
        raise InsufficientSpace(f"no storage element of grid {self.inner.grid.name} can hold {size} bytes")

    def launch(self, job, replicas: dict):
        rt, inner = self.rt, self.inner
        jid, attempt = job.job_id, job.attempt
        pm = ProcessMonitor(jid, attempt, job.owner, rt.clock.now)
        self.running[jid] = pm
        base = f"/federation/{rt.grid.config.name}/{jid}.{attempt}"
        who = inner.grid.principal(self.user)
        try:
            inputs = []
            for lfn in job.inputs:
                loc = replicas.get(lfn)
                if loc is None:
                    raise GridError(f"stage-in: no replica of {lfn}")
                blob = self.stage_in(loc)
                se_name = self._pick_inner_se(blob.size)
                inner_lfn = posixpath.join(base, posixpath.basename(lfn))
                inner.grid.storage[se_name].store(inner_lfn, blob)
                se = inner.grid.storage[se_name]

                def register(b, inner_lfn=inner_lfn, se=se, size=blob.size):
                    if not b.catalogue.exists(base):
                        b.catalogue.mkdir(base, ADMIN, owner=self.user, parents=True)
                    b.catalogue.register_file(inner_lfn, PhysicalLocation(se.name, se.protocol, inner_lfn), size, who)

                self._inner_call(register)
                inputs.append(inner_lfn)
            ad = job.jdl.copy()
            ad["InputData"] = inputs
            ad["OutputDir"] = ""
            text = jdl.unparse(ad)
            ijid = self._inner_call(lambda b: b.submit(text, who, job.base_priority))
            self._inner_call(lambda b: b.elaborate(ijid))
        except GridError as exc:
            return self._fail(jid, attempt, f"federation: {exc}")
        self.outer_of[ijid] = (jid, attempt, pm)
        self.inner_of[jid] = ijid
        rt.trace("forward", self.name, f"job {jid} -> {inner.grid.name}:{ijid}")
        self.report(jid, attempt, "RUNNING")

    def _inner_event(self, kind, subject, detail):
        if kind != "job" or subject not in self.outer_of:
            return
        job = self.inner.grid.broker.jobs.get(subject)
        if job is not None and job.terminal:
            self.rt.clock.schedule(0, self._inner_done, subject, self.generation)

    def _inner_done(self, ijid: int, gen: int):
        entry = self.outer_of.pop(ijid, None)
        if entry is None or gen != self.generation:
            return
        jid, attempt, pm = entry
        self.inner_of.pop(jid, None)
        if self.running.get(jid) is not pm:
            return
        del self.running[jid]
        self.busy_time += self.rt.clock.now - pm.started
        self.completed += 1
        broker = self.inner.grid.broker
        job = broker.jobs[ijid]
        if job.state == JobState.FAILED:
            note = job.history[-1][2] if job.history else ""
            self.report(jid, attempt, "FAILED", f"inner job {self.inner.grid.name}:{ijid} failed: {note}")
        else:
            outputs = {}
            try:
                for lfn in broker.output_lfns(job):
                    outputs[posixpath.basename(lfn)] = self.inner.grid.fetch(lfn)
            except GridError as exc:
                self.report(jid, attempt, "FAILED", f"federation: fetching outputs: {exc}")
                return
            pm.outcome = Outcome(True, 0.0, outputs, f"executed as {self.inner.grid.name}:{ijid}\n")
            pm.out(pm.outcome.stdout)
            self.outbox.append(("save", jid, attempt, pm))
            self.flush()
        self.rt.clock.schedule(0, self._kick, self.generation)

    def kill(self, job_id: int) -> bool:
        ijid = self.inner_of.pop(job_id, None)
        if not super().kill(job_id):
            return False
        if ijid is not None:
            self.outer_of.pop(ijid, None)
            try:
                self._inner_call(lambda b: b.kill(ijid, ADMIN))
            except (GridError, ServiceDown):
                pass
        return True


def federate(sim, outer: str, inner: str, decl: FederationDecl) -> FederationGateway:
    """Register ``inner`` as a CE+SE pair of ``outer`` inside simulation ``sim``."""
    gw = FederationGateway(sim.runtimes[outer], sim.runtimes[inner], decl)
    gw.start()
    return gw
