"""Scenario runner: builds the grids, drives the event loop, injects faults, reports metrics."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..analysis import Analysis, AnalysisTask
from ..broker import HELD, JobState
from ..errors import GridError, InvariantViolation, UnknownTarget
from ..grid import Grid, ensure_dir
from ..optimizer import JobOptimizer, ZombieReaper
from ..site.agents import ComputingElementAgent, FtdAgent
from .bus import Bus, gateway_name
from .clock import SimClock
from .federation import FederationGateway, federate
from .runtime import GridRuntime
from .scenario import FaultDecl, GridDecl, Scenario, load_scenario, parse_scenario

S = JobState


@dataclass
class RunMetrics:
    scenario: str
    seed: int
    jobs: dict
    makespan: float
    bytes_transferred: int
    ce_utilization: dict
    max_concurrent_running: int
    finished: bool
    stalled: bool
    end_time: float
    events: int
    transfers: dict = field(default_factory=dict)
    optimizer_transfers: int = 0
    zombies: int = 0
    stale_reports: int = 0
    bytes_staged: int = 0
    bytes_written: int = 0
    faults: int = 0
    grids: dict = field(default_factory=dict)
    analyses: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None, check_invariants: bool | None = None):
        self.scenario = scenario
        self.settings = scenario.settings
        self.seed = scenario.seed if seed is None else seed
        self.check = self.settings.check_invariants if check_invariants is None else check_invariants
        self.clock = SimClock()
        self.bus = Bus(self.clock, self.settings.latency)
        self.rng = random.Random(self.seed)
        self.lines: list[str] = []
        self.runtimes: dict[str, GridRuntime] = {}
        self.gateways: dict[str, FederationGateway] = {}
        self.optimizers: dict[str, JobOptimizer] = {}
        self.reaper = ZombieReaper(self.settings.heartbeat, self.settings.missed_heartbeats, self.settings.zombie_interval)
        self.pending_submissions = 0
        self.submit_errors = 0
        self.progress_at = 0.0
        self.last_terminal: dict[str, float] = {}
        self.done_events: dict[tuple, int] = {}
        self.faults_injected = 0
        self.analyses: dict[tuple, tuple] = {}  # (grid, user, tag) -> (Analysis client, task)
        self.analysis_results: dict[tuple, dict] = {}
        self.analysis_rows: dict = {}
        self._crashed_by_site: dict[str, list] = {}
        for name, decl in scenario.grids.items():
            self._build(decl)
        for fed in scenario.federations:
            self.gateways[fed.name] = federate(self, fed.outer, fed.inner, fed)
        self._plan_faults()
        self._schedule_passes()

    # ------------------------------------------------------------------ construction

    def trace(self, kind: str, subject, detail: str = ""):
        self.lines.append(f"{self.clock.now:.3f} {kind} {subject} {detail}".rstrip())

    def _build(self, decl: GridDecl):
        vo = decl.vo
        grid = Grid(vo, clock=self.clock, seed=self.seed, name=decl.name)
        rt = GridRuntime(self, grid, "" if decl.name == "main" else decl.name)
        self.runtimes[decl.name] = rt
        bus = self.bus
        bus.add_site(rt.site("central"))
        bus.register(rt.broker_ep, rt.site("central"), "broker")
        for site in sorted(vo.sites.values(), key=lambda s: s.name):
            bus.add_site(rt.site(site.name), site.private)
        for se in sorted(vo.storage_elements.values(), key=lambda s: s.name):
            bus.add_site(rt.site(se.site), self._private(vo, se.site))
            bus.register(rt.ep(se.name), rt.site(se.site), "se")
        st = self.settings
        for spec in sorted(vo.computing_elements.values(), key=lambda c: c.name):
            opts = decl.ces.get(spec.name, {})
            poll = float(opts.get("poll_interval", st.poll_interval))
            batch_opts = {"every": int(opts["fail_every"])} if "fail_every" in opts else {}
            offset = self.rng.uniform(0, poll) if st.stagger else 0.0
            bus.add_site(rt.site(spec.site), self._private(vo, spec.site))
            agent = ComputingElementAgent(rt, spec, poll, opts.get("batch", st.batch), batch_opts, round(offset, 3))
            bus.register(agent.endpoint, rt.site(spec.site), "ce")
            rt.agents[spec.name] = agent
        for f in decl.ftds:
            offset = self.rng.uniform(0, f.poll_interval) if st.stagger else 0.0
            bus.add_site(rt.site(f.site), self._private(vo, f.site))
            agent = FtdAgent(rt, f.name, f.site, f.serves, f.bandwidth, f.poll_interval, round(offset, 3))
            bus.register(agent.endpoint, rt.site(f.site), "ftd")
            rt.agents[f.name] = agent
        grid.listeners.append(lambda kind, subj, detail, rt=rt: self._on_event(rt, kind, subj, detail))
        for t in decl.tags:
            ensure_dir(grid, t.dir, t.owner)
            grid.catalogue.define_tag(t.dir, t.tag, list(t.schema), grid.principal(t.owner))
        for f in decl.files:
            grid.register_data(f.lfn, f.se, f.size, f.owner, f.seed)
            for tag, row in f.tags:
                grid.catalogue.set_tag_values(f.lfn, tag, dict(row), grid.principal(f.owner))
        for agent in rt.agents.values():
            agent.start()
        for w in decl.workload:
            for k in range(w.count):
                self.pending_submissions += 1
                self.clock.at(w.at + k * w.every, self._submit, rt, w, k)
        for a in decl.analyses:
            self.pending_submissions += 1
            self.clock.at(a.at, self._spawn, rt, a)

    @staticmethod
    def _private(vo, site: str) -> bool:
        s = vo.sites.get(site)
        return bool(s and s.private)

    def _schedule_passes(self):
        st = self.settings
        for name, rt in self.runtimes.items():
            if st.optimizer:
                self.optimizers[name] = JobOptimizer(st.optimizer_interval)
                self._every(st.optimizer_interval, self._optimize, rt)
            self._every(st.zombie_interval, self._reap, rt)
            if rt.grid.policy is not None:
                self._every(st.policy_interval, self._police, rt)
        if self.check:
            self._every(st.invariant_interval, self._check_tick)

    def _every(self, interval: float, fn, *args):
        def tick():
            fn(*args)
            self.clock.schedule(interval, tick)

        self.clock.schedule(interval, tick)

    # ------------------------------------------------------------------ event handlers

    def _submit(self, rt: GridRuntime, w, k: int):
        grid = rt.grid
        if not grid.broker_up:
            self.clock.schedule(self.settings.heartbeat, self._submit, rt, w, k)
            return
        self.pending_submissions -= 1
        text = w.jdl.replace("{i}", str(k))
        try:
            jid = grid.broker.submit(text, grid.principal(w.user), w.priority)
            grid.broker.elaborate(jid)
        except GridError as exc:
            self.submit_errors += 1
            rt.trace("submit-error", w.user, str(exc))

    def _spawn(self, rt: GridRuntime, a):
        grid = rt.grid
        if not grid.broker_up:
            self.clock.schedule(self.settings.heartbeat, self._spawn, rt, a)
            return
        self.pending_submissions -= 1
        client = Analysis(grid, grid.principal(a.user))
        task = AnalysisTask(a.tag, a.macro, a.interpreter, a.top_dir, a.selection, list(a.input_files), a.hint,
                            a.level, list(a.outputs))
        try:
            client.materialize(task)
        except GridError as exc:
            self.submit_errors += 1
            rt.trace("analysis-error", a.user, f"{a.tag}: {exc}")
            return
        self.analyses[(grid.name, a.user, a.tag)] = (client, task)
        rt.trace("analysis", a.user, f"{a.tag} {len(task.subjobs)} sub-jobs")

    def merge_analyses(self) -> dict:
        """Collect every analysis task; returns metric rows keyed ``grid:user:tag``."""
        rows = {}
        for key, (client, task) in sorted(self.analyses.items()):
            row = {"subjobs": len(task.subjobs), "states": client.status(task)["counts"]}
            if not self.runtimes[key[0]].grid.broker_up:
                row["error"] = "broker down"
            else:
                try:
                    merged = client.collect_merge(task)
                except GridError as exc:
                    row["error"] = str(exc)
                else:
                    self.analysis_results[key] = merged
                    row["merged"] = {n: hashlib.sha256(json.dumps(r.to_doc(), sort_keys=True).encode()).hexdigest()
                                     for n, r in merged.items()}
            rows[":".join(key)] = row
        return rows

    def _on_event(self, rt: GridRuntime, kind: str, subject, detail: str):
        rt.trace(kind, subject, detail)
        now = self.clock.now
        self.progress_at = now
        if kind != "job":
            return
        broker = rt.grid.broker
        m = rt.metrics
        running = broker.count(S.RUNNING)
        if running > m.max_running:
            m.max_running = running
        state = detail.split(" ", 1)[0]
        if state == "ZOMBIE":
            m.zombies += 1
        elif state == "DONE":
            key = (rt.grid.name, subject)
            self.done_events[key] = self.done_events.get(key, 0) + 1
        job = broker.jobs.get(subject)
        if job is not None and job.terminal:
            self.last_terminal[rt.grid.name] = now
        elif job is not None and job.awaiting_validation:
            self.clock.schedule(0, self._validate, rt, subject)

    def _validate(self, rt: GridRuntime, jid: int):
        if rt.grid.broker_up:
            job = rt.grid.broker.jobs.get(jid)
            if job is not None and job.state == S.DONE and job.awaiting_validation:
                rt.grid.broker.validate(jid)

    def _optimize(self, rt: GridRuntime):
        if rt.grid.broker_up:
            opt = self.optimizers[rt.grid.name]
            for action in opt.run(rt.grid.broker):
                rt.trace("optimizer", action[0], " ".join(map(str, action[1:])))
            rt.metrics.optimizer_transfers = opt.stats.get("transfers", 0)

    def _reap(self, rt: GridRuntime):
        if rt.grid.broker_up:
            self.reaper.run(rt.grid.broker, self.clock.now)

    def _police(self, rt: GridRuntime):
        if rt.grid.broker_up:
            rt.grid.policy.run(rt.grid.broker)

    def _check_tick(self):
        check_invariants(self)

    # ------------------------------------------------------------------ faults

    def _resolve(self, target: str):
        rt = self.runtimes["main"]
        local = target
        head, sep, rest = target.partition("/")
        if sep and head in self.runtimes and head != "main":
            rt, local = self.runtimes[head], rest
        vo = rt.grid.config
        if local == "broker":
            return "broker", rt, local
        if local.startswith("gateway:"):
            site = local[len("gateway:"):]
            if gateway_name(rt.site(site)) not in self.bus.endpoints:
                raise UnknownTarget(target)
            return "gateway", rt, site
        if local.startswith("site:"):
            local = local[len("site:"):]
            if rt.site(local) not in self.bus.gateways:
                raise UnknownTarget(target)
            return "site", rt, local
        if local in rt.agents:
            return "agent", rt, local
        if local in rt.grid.storage:
            return "se", rt, local
        if local in vo.sites or rt.site(local) in self.bus.gateways:
            return "site", rt, local
        raise UnknownTarget(target)

    def _plan_faults(self):
        planned = list(self.scenario.faults)
        frng = random.Random(f"{self.seed}:faults")
        for rf in self.scenario.random_faults:
            rt = self.runtimes[rf.grid]
            if rf.targets == "ces":
                names = sorted(n for n, a in rt.agents.items() if type(a) is ComputingElementAgent)
            elif rf.targets == "ftds":
                names = sorted(n for n, a in rt.agents.items() if isinstance(a, FtdAgent))
            else:
                raise UnknownTarget(rf.targets)
            k = int(round(rf.fraction * len(names)))
            for name in sorted(frng.sample(names, k)):
                t = frng.uniform(rf.start, rf.end)
                down = frng.uniform(*rf.downtime)
                target = rt.ep(name)
                planned.append(FaultDecl(round(t, 3), target, "crash", rf.line))
                planned.append(FaultDecl(round(t + down, 3), target, "restart", rf.line))
        for f in planned:
            self._resolve(f.target)
        self.planned_faults = sorted(planned, key=lambda f: (f.time, f.target, f.kind))
        for f in self.planned_faults:
            self.clock.at(f.time, self.inject_fault, f)

    def inject_fault(self, event: FaultDecl):
        kind, rt, name = self._resolve(event.target)
        up = event.kind == "restart"
        self.faults_injected += 1
        self.progress_at = self.clock.now
        self.trace("fault", event.target, event.kind)
        if event.kind in ("partition_start", "partition_end"):
            site = rt.site(name) if kind == "site" else self.bus.endpoint(self._endpoint(kind, rt, name)).site
            (self.bus.partitioned.add if event.kind == "partition_start" else self.bus.partitioned.discard)(site)
            return
        if kind == "broker":
            if up:
                if not rt.grid.broker_up:
                    rt.grid.restart_broker()
                    self.bus.set_up(rt.broker_ep, True)
                    for jid in rt.grid.broker.ids_in(S.DONE):
                        self.clock.schedule(0, self._validate, rt, jid)
            else:
                rt.grid.crash_broker()
                self.bus.set_up(rt.broker_ep, False)
        elif kind == "agent":
            agent = rt.agents[name]
            agent.restart() if up else agent.crash()
        elif kind == "se":
            self.bus.set_up(rt.ep(name), up)
        elif kind == "gateway":
            self.bus.set_up(gateway_name(rt.site(name)), up)
        elif kind == "site":
            self._site_fault(rt, name, up)

    def _endpoint(self, kind, rt, name) -> str:
        return {"broker": rt.broker_ep, "agent": rt.ep(name), "se": rt.ep(name), "gateway": gateway_name(rt.site(name))}[kind]

    def _site_fault(self, rt: GridRuntime, site: str, up: bool):
        bsite = rt.site(site)
        if not up:
            hit = []
            for name, agent in sorted(rt.agents.items()):
                if self.bus.endpoint(agent.endpoint).site == bsite and agent.alive:
                    agent.crash()
                    hit.append(agent)
            for ep in sorted(self.bus.endpoints.values(), key=lambda e: e.name):
                if ep.site == bsite and ep.up and ep.kind in ("se", "gateway"):
                    ep.up = False
                    hit.append(ep)
            self._crashed_by_site[bsite] = hit
        else:
            for x in self._crashed_by_site.pop(bsite, []):
                if hasattr(x, "restart"):
                    x.restart()
                else:
                    x.up = True

    # ------------------------------------------------------------------ running

    def finished(self) -> bool:
        if self.pending_submissions:
            return False
        for rt in self.runtimes.values():
            b = rt.grid.broker
            if not rt.grid.broker_up or b.unfinished or b.active_transfer_count:
                return False
        return True

    def stalled(self) -> bool:
        return self.clock.now - self.progress_at > self.settings.stall_after

    def run(self, until: float | None = None) -> RunMetrics:
        limit = self.settings.until if until is None else until
        self.clock.run(None if limit == float("inf") else limit, lambda: self.finished() or self.stalled())
        if self.check:
            check_invariants(self, final=True)
        self.analysis_rows = self.merge_analyses()
        return self.metrics()

    def kill(self, job_id: int, principal, grid: str = "main"):
        """Kill a job and signal its CE over the bus."""
        rt = self.runtimes[grid]
        ce = rt.grid.broker.kill(job_id, principal)
        agent = rt.agents.get(ce) if ce else None
        if agent is not None:
            self.bus.send(rt.broker_ep, agent.endpoint, agent.kill, job_id)
        return ce

    # ------------------------------------------------------------------ metrics

    def grid_metrics(self, rt: GridRuntime) -> dict:
        b = rt.grid.broker
        jobs = {"total": len(b.jobs)}
        for st in S:
            n = b.count(st)
            if n:
                jobs[st.value] = n
        makespan = self.last_terminal.get(rt.grid.name, 0.0) if b.jobs else 0.0
        util = {}
        now = self.clock.now
        for agent in rt.ce_agents():
            busy = agent.busy_time + sum(now - pm.started for pm in agent.running.values())
            slots = agent.capacity() if isinstance(agent, FederationGateway) else agent.spec.max_slots
            util[agent.name] = round(busy / (slots * makespan), 6) if slots and makespan else 0.0
        tr = {"total": len(b.transfers)}
        for t in b.transfers.values():
            tr[t.state.value] = tr.get(t.state.value, 0) + 1
        return {
            "jobs": jobs, "makespan": round(makespan, 3), "ce_utilization": util, "transfers": tr,
            "max_concurrent_running": rt.metrics.max_running, **{k: v for k, v in rt.metrics.as_dict().items() if k != "max_running"},
        }

    def metrics(self) -> RunMetrics:
        main = self.runtimes["main"]
        g = self.grid_metrics(main)
        others = {name: self.grid_metrics(rt) for name, rt in self.runtimes.items() if name != "main"}
        return RunMetrics(
            scenario=self.scenario.name, seed=self.seed, jobs=g["jobs"], makespan=g["makespan"],
            bytes_transferred=g["bytes_transferred"], ce_utilization=g["ce_utilization"],
            max_concurrent_running=g["max_concurrent_running"], finished=self.finished(), stalled=self.stalled(),
            end_time=round(self.clock.now, 3), events=self.clock.steps, transfers=g["transfers"],
            optimizer_transfers=g["optimizer_transfers"], zombies=g["zombies"], stale_reports=g["stale_reports"],
            bytes_staged=g["bytes_staged"], bytes_written=g["bytes_written"], faults=self.faults_injected, grids=others,
            analyses=self.analysis_rows,
        )

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


# ---------------------------------------------------------------------------- invariants


def check_invariants(sim: Simulation, final: bool = False):
    """Raise InvariantViolation if any cross-module invariant is broken."""
    problems = []
    fault_free = not sim.planned_faults
    for name, rt in sim.runtimes.items():
        grid, b = rt.grid, rt.grid.broker
        for se in grid.storage.values():
            if se.used > se.capacity:
                problems.append(f"{se.name}: used {se.used} exceeds capacity {se.capacity}")
            held = sum(x.size for x, _ in se.permanent.values()) + sum(x.size for x, _ in se.cache.values())
            if held != se.used:
                problems.append(f"{se.name}: used {se.used} != held {held}")
        if sum(b.counts().values()) != len(b.jobs):
            problems.append(f"{name}: state counts do not cover all jobs")
        for agent in rt.ce_agents():
            cap = agent.capacity() if isinstance(agent, FederationGateway) else agent.spec.max_slots
            if len(agent.running) > cap:
                problems.append(f"{agent.name}: {len(agent.running)} running > {cap} slots")
        if fault_free and grid.broker_up:
            running = sum(len(a.running) for a in rt.ce_agents())
            held = b.held_count()
            if running != held:
                problems.append(f"{name}: slot conservation broken, {running} running at CEs vs {held} held")
        if final or len(b.jobs) <= 2000:
            for job in b.jobs.values():
                states = [h[1] for h in job.history]
                if states.count("DONE") > 1 or states.count("VALIDATED") > 1:
                    problems.append(f"{name}: job {job.job_id} completed twice")
                for i, st in enumerate(states[:-1]):
                    if st in ("VALIDATED", "FAILED"):
                        problems.append(f"{name}: job {job.job_id} left terminal state {st}")
                        break
                if job.state in HELD and job.assigned_ce is None:
                    problems.append(f"{name}: job {job.job_id} held without a CE")
        if final:
            for path, entry in grid.catalogue.walk():
                if entry.kind != "file":
                    continue
                for rep in entry.replicas:
                    se = grid.storage.get(rep.se_name)
                    if se is None or not se.has(rep.path):
                        problems.append(f"{name}: replica of {path} missing at {rep.se_name}")
    for key, n in sim.done_events.items():
        if n > 1:
            problems.append(f"{key[0]}: job {key[1]} reported DONE {n} times")
    if problems:
        raise InvariantViolation("; ".join(problems[:10]))


# ---------------------------------------------------------------------------- entry points


def run_scenario(scenario, seed: int | None = None, until: float | None = None, trace_path=None,
                 metrics_path=None, check_invariants: bool | None = None):
    """Run a scenario (path, text or parsed) and return (metrics, trace text)."""
    if isinstance(scenario, (str, Path)) and Path(scenario).exists():
        scenario = load_scenario(scenario)
    elif isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    sim = Simulation(scenario, seed, check_invariants)
    metrics = sim.run(until)
    trace = sim.trace_text()
    if trace_path is not None:
        Path(trace_path).write_text(trace)
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics.to_json())
    return metrics, trace


def inject_fault(sim: Simulation, event: FaultDecl):
    sim.inject_fault(event)


__all__ = ["RunMetrics", "Simulation", "check_invariants", "inject_fault", "run_scenario"]
