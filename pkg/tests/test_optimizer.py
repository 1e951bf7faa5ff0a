from __future__ import annotations

import random

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from minigrid import jdl
from minigrid.auth import ADMIN
from minigrid.broker import DEFERRED, HELD, JobState as S
from minigrid.config import PolicyRules
from minigrid.logger import SEVERITIES, EventLog
from minigrid.optimizer import JobOptimizer, PolicyMonitor, ZombieReaper, classify_blocked, log, query_log
from minigrid.simnet.runner import Simulation
from minigrid.simnet.scenario import parse_scenario

from .generators import SES, plausible_job_ad, random_ce_ad
from .harness import match_grid, populate
from .oracles import blocked_oracle


def ce(name, close, free=2, **kw):
    return jdl.resource_ad(name, name.lower(), free_slots=free, max_slots=4, close_se=close, **kw)


def _blocked_world(seed):
    rng = random.Random(seed)
    g = match_grid()
    lfns = populate(g, rng, 12)
    alice = g.principal("alice")
    user_ads = {}
    for _ in range(25):
        ad = plausible_job_ad(rng)
        ad["InputData"] = rng.sample(lfns, rng.randint(0, 2))
        jid = g.broker.submit(ad, alice)
        user_ads[jid] = ad
    g.broker.elaborate_pending()
    ces = [random_ce_ad(rng, f"CE{i}") for i in range(rng.randint(1, 5))]
    for c in ces:
        c["FreeSlots"] = 1
    return g, user_ads, ces


@pytest.mark.parametrize("seed", range(6))
def test_blocked_classification_matches_clause_stripping_oracle(seed):
    g, user_ads, ces = _blocked_world(seed)
    got = classify_blocked(g.broker, ces)
    want = {}
    for jid, ad in user_ads.items():
        reps = [{r.se_name for r in g.catalogue.lookup(x, ADMIN).replicas} for x in ad.value("InputData")]
        verdict = blocked_oracle(ad, reps, ces)
        if verdict is not None:
            want[jid] = verdict
    assert got == want


def test_blocked_fixture_exercises_every_verdict():
    kinds = set()
    for seed in range(6):
        g, _, ces = _blocked_world(seed)
        verdicts = classify_blocked(g.broker, ces)
        kinds |= set(verdicts.values())
        if len(verdicts) < len(g.broker.waiting_jobs()):
            kinds.add("runnable")
    assert {"data", "other", "runnable"} <= kinds


def test_optimizer_replicates_to_the_freest_matching_ce():
    g = match_grid()
    alice = g.principal("alice")
    g.register_data("/alice/in", "SE_CERN", 100, owner="alice")
    jid = g.broker.submit('[ Executable = "sim"; InputData = {"/alice/in"}; Requirements = other.Platform == "linux"; ]', alice)
    ads = {"A": ce("A", ["SE_LYON"], free=1), "B": ce("B", ["SE_FZK"], free=3), "C": ce("C", ["SE_CNAF"], free=9, platform="solaris")}
    opt = JobOptimizer()
    actions = opt.run(g.broker, ads)
    assert [a[0::2] for a in actions] == [("transfer", "/alice/in", jid)]
    assert actions[0][3] == "SE_FZK"
    assert opt.run(g.broker, ads) == []  # coalesced while pending
    assert opt.stats["transfers"] == 1


def test_optimizer_is_idempotent_when_everything_is_eligible():
    g = match_grid()
    alice = g.principal("alice")
    g.register_data("/alice/in", "SE_CERN", 100, owner="alice")
    g.broker.submit('[ Executable = "sim"; InputData = {"/alice/in"}; ]', alice)
    ads = {"A": ce("A", ["SE_CERN"])}
    opt = JobOptimizer()
    assert opt.run(g.broker, ads) == [] == opt.run(g.broker, ads)


def test_unmatchable_job_is_warned_once():
    g = match_grid()
    jid = g.broker.submit('[ Executable = "sim"; Requirements = other.Platform == "vms"; ]', g.principal("alice"))
    opt = JobOptimizer()
    for _ in range(3):
        assert opt.run(g.broker, {"A": ce("A", ["SE_CERN"])}) == []
    warns = g.log.query(severity="warn", source="job-optimizer", subject=jid)
    assert len(warns) == 1 and g.broker.job(jid).state == S.WAITING


@given(st.integers(0, 10**9))
def test_optimizer_only_moves_data_for_data_blocked_jobs(seed):
    g, user_ads, ces = _blocked_world(seed % 1000)
    ads = {c.value("Name"): c for c in ces}
    classes = classify_blocked(g.broker, ces)
    for action in JobOptimizer().run(g.broker, ads):
        assert classes[action[4]] == "data"


# ---------------------------------------------------------------- zombies


def test_reaper_requeues_silent_jobs_only():
    g = match_grid()
    alice = g.principal("alice")
    ids = [g.broker.submit('[ Executable = "plain"; ]', alice) for _ in range(3)]
    g.broker.elaborate_pending()
    for _ in ids:
        g.broker.request_job(ce("CE1", ["SE_CERN"]))
    reaper = ZombieReaper(heartbeat=60, missed=3)
    g.clock.t = 179
    assert reaper.run(g.broker) == []
    g.broker.heartbeat("CE1", [(ids[0], 1)])
    g.clock.t = 180
    assert reaper.run(g.broker) == [("requeue", ids[1]), ("requeue", ids[2])]
    assert [g.broker.job(j).state for j in ids] == [S.ASSIGNED, S.WAITING, S.WAITING]
    assert "heartbeats missed" in g.broker.job(ids[1]).history[-2][2]
    assert reaper.run(g.broker) == []


CRASH = """
name: crash
seed: 2
vo:
  vo: c
  users: {alice: {groups: [alice], home: /alice}}
  sites: {a: {}, b: {}}
  storage_elements: {SE_A: {site: a, capacity: 1e12}, SE_B: {site: b, capacity: 1e12}}
  computing_elements:
    CE_A: {site: a, max_slots: 5, close_se: [SE_A]}
    CE_B: {site: b, max_slots: 5, close_se: [SE_B]}
  commands:
    sim: {validation: outputs_nonzero, profile: {kind: produce, duration: 1000, outputs: [{name: o, size: 5}]}}
workload:
  - {user: alice, count: 5, jdl: '[ Executable = "sim"; OutputFiles = {"o"}; Requirements = other.Name == "CE_A"; ]'}
faults:
  - {time: 100, target: CE_A, kind: crash}
  - {time: 5000, target: CE_A, kind: restart}
settings: {heartbeat: 60, missed_heartbeats: 3, zombie_interval: 1, stagger: false}
"""


def test_crashed_ce_jobs_requeue_within_three_heartbeats():
    sim = Simulation(parse_scenario(CRASH))
    sim.run(until=100)
    b = sim.runtimes["main"].grid.broker
    assert b.count(S.RUNNING) == 5
    sim.run(until=100 + 3 * 60)
    assert b.count(S.WAITING) == 5
    m = sim.run()
    assert m.jobs == {"total": 5, "VALIDATED": 5}
    assert m.zombies == 5
    # the dead attempt never completes: each job has exactly one DONE
    assert all([h[1] for h in job.history].count("DONE") == 1 for job in b.jobs.values())


def test_healthy_system_has_no_zombies():
    sim = Simulation(parse_scenario(CRASH.split("faults:")[0] + "settings: {stagger: false}\n"))
    m = sim.run()
    assert m.zombies == 0 and m.jobs["VALIDATED"] == 5


# ---------------------------------------------------------------- policies


def test_production_role_boost():
    g = match_grid()
    mon = PolicyMonitor(PolicyRules((("production", 10),)), g.roles_of)
    a = g.broker.submit('[ Executable = "plain"; ]', g.principal("alice"))
    b = g.broker.submit('[ Executable = "plain"; ]', g.principal("bob"))
    g.broker.elaborate_pending()
    mon.run(g.broker)
    assert g.broker.job(a).priority == 10 and g.broker.job(b).priority == 0
    assert mon.run(g.broker) == []


def test_empty_rules_are_identity():
    g = match_grid()
    g.broker.submit('[ Executable = "plain"; ]', g.principal("alice"), priority=3)
    before = g.broker.state_digest()
    assert PolicyMonitor(PolicyRules(), g.roles_of).run(g.broker) == []
    assert g.broker.state_digest() == before


CAPPED = """
name: capped
seed: 4
vo:
  vo: cap
  users: {alice: {groups: [alice], roles: [production], home: /alice}, bob: {groups: [bob], home: /bob}}
  roles: [production, admin]
  sites: {a: {}}
  storage_elements: {SE_A: {site: a, capacity: 1e12}}
  computing_elements: {CE_A: {site: a, max_slots: 6, close_se: [SE_A]}}
  commands:
    sim: {validation: outputs_nonzero, profile: {kind: produce, duration: 300, jitter: 0.5, outputs: [{name: o, size: 5}]}}
  policies: {role_boost: {production: 10}, user_caps: {alice: 2}}
workload:
  - {user: alice, count: 5, jdl: '[ Executable = "sim"; OutputFiles = {"o"}; ]'}
  - {user: bob, count: 3, at: 1, jdl: '[ Executable = "sim"; OutputFiles = {"o"}; ]'}
"""


def test_user_cap_holds_at_every_instant():
    sim = Simulation(parse_scenario(CAPPED))
    grid = sim.runtimes["main"].grid
    peak = []

    def watch(kind, subject, detail):
        held = sum(1 for j in grid.broker.jobs.values() if j.owner == "alice" and j.state in HELD)
        peak.append(held)
        assert held <= 2

    grid.listeners.append(watch)
    m = sim.run()
    assert m.jobs == {"total": 8, "VALIDATED": 8}
    assert max(peak) == 2
    assert all(j.priority != DEFERRED for j in grid.broker.jobs.values())


# ---------------------------------------------------------------- event log


def test_every_failed_job_has_an_error_event():
    g = match_grid()
    alice = g.principal("alice")
    ids = [g.broker.submit('[ Executable = "plain"; ]', alice) for _ in range(4)]
    g.broker.elaborate_pending()
    g.broker.kill(ids[1], alice)
    g.broker.report_state(ids[3], "FAILED", "disk full")
    failed = [j.job_id for j in g.broker.jobs.values() if j.state == S.FAILED]
    assert failed == [ids[1], ids[3]]
    assert all(query_log(g.log, severity="error", subject=j) for j in failed)


@given(st.lists(st.tuples(st.sampled_from(SEVERITIES), st.sampled_from(["broker", "ce", "ftd"]),
                          st.integers(0, 3), st.floats(0, 5)), max_size=40))
def test_log_filters_are_ordered_subsets(events):
    t = [0.0]
    ev = EventLog(lambda: t[0])
    sizes = []
    for sev, src, subj, dt in events:
        t[0] += dt
        log(ev, src, sev, "m", subj)
        sizes.append(len(ev))
    assert sizes == sorted(sizes)
    everything = query_log(ev)
    assert [(e.time, e.seq) for e in everything] == sorted((e.time, e.seq) for e in everything)
    for sev in SEVERITIES:
        sub = query_log(ev, severity=sev)
        assert set(sub) <= set(everything) and all(e.severity == sev for e in sub)
    late = query_log(ev, since=2.0, source="ce")
    assert late == [e for e in everything if e.time >= 2.0 and e.source == "ce"]


def test_log_dump_format():
    ev = EventLog(lambda: 1.5)
    log(ev, "broker", "error", "job failed: x", 7)
    assert ev.dump() == "1.500 error broker 7 job failed: x\n"
