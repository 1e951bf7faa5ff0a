from __future__ import annotations

import json

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from minigrid.auth import ADMIN
from minigrid.broker import JobState as S
from minigrid.errors import InvariantViolation, NameClash, ScenarioParseError, UnknownTarget
from minigrid.simnet.bus import Bus
from minigrid.simnet.clock import SimClock
from minigrid.simnet.runner import Simulation, check_invariants, run_scenario
from minigrid.simnet.scenario import FaultDecl, load_scenario, parse_scenario

from .conftest import SCENARIOS
from .harness import federation_variant, output_digests

MINI = """
name: mini
seed: 1
vo: small_vo.yaml
workload:
  - {user: alice, count: 6, every: 10, jdl: '[ Executable = "aliroot"; OutputFiles = {"galice.root"}; ]'}
"""


def mini(text=MINI, **kw):
    return Simulation(parse_scenario(text, base=SCENARIOS), **kw)


# ---------------------------------------------------------------- clock and bus


@given(st.lists(st.floats(0, 1000, allow_nan=False), max_size=40))
def test_clock_fires_in_time_then_insertion_order(times):
    clock = SimClock()
    fired = []
    for i, t in enumerate(times):
        clock.at(t, lambda i=i: fired.append((clock.now, i)))
    clock.run()
    assert fired == sorted(fired)
    assert [i for _, i in fired] == [i for _, i in sorted((t, i) for i, t in enumerate(times))]


def test_cancelled_events_do_not_fire():
    clock = SimClock()
    hit = []
    ev = clock.schedule(5, hit.append, 1)
    clock.schedule(6, hit.append, 2)
    ev.cancel()
    clock.run()
    assert hit == [2] and clock.now == 6


def test_bus_delivers_fifo_per_pair_and_drops_across_partitions():
    clock = SimClock()
    bus = Bus(clock, latency=0.5)
    for site in ("a", "b"):
        bus.add_site(site)
    bus.register("x", "a", "ce")
    bus.register("y", "b", "ce")
    got = []
    for i in range(3):
        bus.send("x", "y", got.append, i)
    clock.run()
    assert got == [0, 1, 2] and clock.now == 0.5
    bus.partitioned.add("b")
    assert not bus.send("x", "y", got.append, 9)
    assert not bus.reachable("y", "x")  # symmetric
    bus.partitioned.clear()
    bus.send("x", "y", got.append, 3)
    bus.partitioned.add("a")  # cut while in flight
    clock.run()
    assert got == [0, 1, 2] and bus.dropped == 2


# ---------------------------------------------------------------- runs


def test_empty_scenario():
    m, trace = run_scenario("name: empty\nvo: {vo: e}\n")
    assert m.jobs == {"total": 0} and m.makespan == 0 and m.finished and trace == ""


def test_same_seed_same_trace_and_metrics(tmp_path):
    a = run_scenario(SCENARIOS / "broker_restart.yaml", trace_path=tmp_path / "a.trace", metrics_path=tmp_path / "a.json")
    b = run_scenario(SCENARIOS / "broker_restart.yaml", trace_path=tmp_path / "b.trace", metrics_path=tmp_path / "b.json")
    assert (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert a[0] == b[0]


def test_seed_changes_the_schedule():
    _, t1 = run_scenario(SCENARIOS / "fault_tolerance.yaml", seed=1, until=2000)
    _, t2 = run_scenario(SCENARIOS / "fault_tolerance.yaml", seed=2, until=2000)
    assert t1 != t2


def test_metrics_json_round_trip():
    m, _ = run_scenario(parse_scenario(MINI, base=SCENARIOS))
    doc = json.loads(m.to_json())
    assert doc["jobs"] == {"total": 6, "VALIDATED": 6}
    assert 0 < doc["ce_utilization"]["CE_CERN"] <= 1
    assert doc["max_concurrent_running"] == 4


def test_crashed_ce_jobs_are_requeued_and_the_run_completes():
    text = MINI + "faults:\n  - {time: 100, target: CE_CERN, kind: crash}\n  - {time: 3000, target: CE_CERN, kind: restart}\n"
    m, trace = run_scenario(parse_scenario(text, base=SCENARIOS))
    assert m.jobs == {"total": 6, "VALIDATED": 6}
    assert m.zombies >= 1 and "ZOMBIE" in trace


def test_broker_crash_stalls_then_resumes_from_the_journal():
    sim = Simulation(load_scenario(SCENARIOS / "broker_restart.yaml"))
    grid = sim.runtimes["main"].grid
    sim.run(until=699)
    sim.run(until=999)
    assert not grid.broker_up
    outage = [line for line in sim.lines if 700 < float(line.split()[0]) < 1000 and line.split()[1] == "job"]
    assert outage == []
    m = sim.run()
    assert m.jobs == {"total": 12, "VALIDATED": 12}
    from minigrid.broker import Broker

    replay = Broker.restore(grid.catalogue, grid.config, list(grid.broker.journal.records), storage=grid.storage)
    assert replay.state_digest() == grid.broker.state_digest()


def test_short_partition_loses_no_jobs():
    text = MINI + "faults:\n  - {time: 30, target: lyon, kind: partition, duration: 90}\n"
    m, _ = run_scenario(parse_scenario(text, base=SCENARIOS))
    assert m.jobs == {"total": 6, "VALIDATED": 6} and m.zombies == 0


def test_unknown_fault_target():
    with pytest.raises(UnknownTarget):
        mini(MINI + "faults:\n  - {time: 1, target: CE_MARS, kind: crash}\n")
    sim = mini()
    with pytest.raises(UnknownTarget):
        sim.inject_fault(FaultDecl(0, "nowhere", "crash"))


@pytest.mark.parametrize("text, line", [
    ("name: x\nvo: {vo: v}\nworkload:\n  - {user: alice, jdl: '[ A = 1; ]', count: x}\n", 4),
    ("name: x\nvo: {vo: v}\nbogus: 1\n", 3),
    ("name: x\nvo: {vo: v}\nfaults:\n  - {time: 5, target: b, kind: restart}\n", 4),
    ("name: x\nvo: {vo: v}\nfaults:\n  - {time: 5, target: b, kind: melt}\n", 4),
    ("name: x\nworkload: []\n", 1),
])
def test_scenario_errors_carry_line_numbers(text, line):
    with pytest.raises(ScenarioParseError) as info:
        parse_scenario(text)
    assert info.value.line == line


def test_invariant_checker_catches_a_broken_counter():
    sim = mini()
    sim.run(until=200)
    se = sim.runtimes["main"].grid.storage["SE_CERN"]
    se.used += 1
    with pytest.raises(InvariantViolation):
        check_invariants(sim)


# ---------------------------------------------------------------- federation


@pytest.fixture(scope="module")
def digests():
    return {levels: output_digests(levels) for levels in (0, 1, 2)}


def test_federated_outputs_are_registered_in_the_outer_catalogue(digests):
    out, m = digests[1]
    assert m.jobs == {"total": 3, "VALIDATED": 3}
    assert sorted(out) == [f"/alice/results/{i}/histo.json" for i in range(3)]


def test_federated_and_direct_runs_give_identical_outputs(digests):
    assert digests[0][0] == digests[1][0] == digests[2][0]
    assert len(set(digests[0][0].values())) == 3


def test_two_level_federation_completes(digests):
    out, m = digests[2]
    assert m.jobs == {"total": 3, "VALIDATED": 3}
    assert m.grids["tier1"]["jobs"] == {"total": 3, "VALIDATED": 3}
    assert m.grids["tier2"]["jobs"] == {"total": 3, "VALIDATED": 3}


def test_each_grid_keeps_its_own_catalogue():
    sim = Simulation(parse_scenario(federation_variant(2)))
    sim.run()
    cats = [rt.grid.catalogue for rt in sim.runtimes.values()]
    assert len({id(c) for c in cats}) == 3
    assert not sim.runtimes["tier2"].grid.catalogue.exists("/alice/results")
    assert sim.runtimes["tier2"].grid.catalogue.exists("/federation/tier1")


def test_busy_inner_grid_advertises_no_free_slots():
    sim = Simulation(parse_scenario(federation_variant(1)))
    gw = sim.gateways["FED_T2"]
    assert gw.ad().value("FreeSlots") == 2
    # inputs reach the virtual SE through the optimizer first, so work arrives around t=150
    sim.run(until=200)
    assert gw.ad().value("FreeSlots") == 0 and len(gw.running) == 2
    assert sim.runtimes["main"].grid.broker.job(3).state == S.WAITING


def test_federation_name_clash():
    doc = yaml.safe_load(federation_variant(1))
    doc["federations"][0]["virtual_se"] = "SE_HQ"
    with pytest.raises(NameClash):
        Simulation(parse_scenario(yaml.safe_dump(doc)))
