"""End-to-end acceptance checks.

Each test records a PASS or FAIL line; ``conftest.py`` prints the collected
lines in the terminal summary.  Running this file directly does the same:

    python3 -m tests.test_acceptance
"""

from __future__ import annotations

import contextlib
import functools
import json
import random
import re
import time
from collections import Counter
from pathlib import Path

import pytest

from minigrid.analysis import Analysis
from minigrid.auth import ADMIN
from minigrid.simnet.runner import Simulation, run_scenario
from minigrid.simnet.scenario import load_scenario

from .generators import PRINCIPALS, random_catalogue, random_query
from .harness import elaboration_run, matchmaking_run, output_digests, reinstall_run
from .oracles import Cmp, FullScan, query_text

SCEN = Path(__file__).resolve().parents[1] / "scenarios"
RUNNABLE = sorted(p.name for p in SCEN.glob("*.yaml") if not p.stem.endswith("_vo"))

RESULTS: dict[int, tuple[str, str, str]] = {}
TITLES = {
    1: "production replay: 450 concurrent and all validated within 60 s",
    2: "catalogue queries agree with the full-scan oracle",
    3: "matchmaking agrees with double evaluation",
    4: "re-sharding is transparent",
    5: "jobs survive CE crashes",
    6: "optimizer replication unblocks stuck jobs",
    7: "analysis merge independent of the split",
    8: "removed packages are re-installed",
    9: "federated output digests equal direct ones",
    10: "same seed gives byte-identical runs",
}


@contextlib.contextmanager
def criterion(n: int, detail: list):
    """Record the outcome of criterion ``n``; ``detail`` is filled in by the body."""
    try:
        yield
    except BaseException:
        RESULTS[n] = ("FAIL", TITLES[n], "; ".join(detail))
        raise
    RESULTS[n] = ("PASS", TITLES[n], "; ".join(detail))


def report_lines() -> list[str]:
    return [f"{RESULTS[n][0]} [{n}] {RESULTS[n][1]}" + (f" ({RESULTS[n][2]})" if RESULTS[n][2] else "")
            for n in sorted(RESULTS)]


@functools.lru_cache(maxsize=None)
def first_run(name: str):
    """(metrics JSON, trace, wall seconds) of the first run of a scenario; shared by criteria 1 and 10."""
    t0 = time.perf_counter()
    metrics, trace = run_scenario(SCEN / name)
    return metrics.to_json(), trace, time.perf_counter() - t0


def job_states(trace: str) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for line in trace.splitlines():
        parts = line.split()
        if len(parts) >= 4 and parts[1] == "job":
            out.setdefault(int(parts[2]), []).append(parts[3])
    return out


# ---------------------------------------------------------------- 1


@pytest.mark.slow
def test_production_replay():
    detail = []
    with criterion(1, detail):
        text, trace, wall = first_run("production2001.yaml")
        m = json.loads(text)
        detail += [f"max_concurrent_running={m['max_concurrent_running']}",
                   f"validated={m['jobs'].get('VALIDATED', 0)}/{m['jobs']['total']}", f"wall={wall:.1f}s"]
        assert m["max_concurrent_running"] == 450
        assert m["jobs"]["total"] == 6000 and m["jobs"].get("VALIDATED") == 6000
        assert m["finished"] and not m["stalled"]
        assert wall < 60
        assert trace.count(" VALIDATED\n") == 6000


# ---------------------------------------------------------------- 2


MC_QUERY = (["alice", "sim", "2001*", "V3.05%", "*.*.root"], "MonteCarlo", Cmp("npart", ">", 100), ())


def test_catalogue_query_oracle():
    detail = []
    with criterion(2, detail):
        checked = mismatches = nonempty = 0
        for seed in (101, 202):
            cat = random_catalogue(10**4, seed)
            scan = FullScan(cat)
            assert len(scan.entries) >= 10**4
            files = [p for p, e in scan.entries.items() if e.kind == "file"]
            rng = random.Random(seed)
            queries = [MC_QUERY] + [random_query(rng, files, cat) for _ in range(499)]
            for segs, tag, first, rest in queries:
                who = rng.choice(PRINCIPALS)
                want = scan.find(segs, who, tag, first, rest)
                got = cat.find(query_text(segs, tag, first, rest), who)
                mismatches += got != want
                nonempty += bool(want)
                checked += 1
        detail += [f"queries={checked}", f"mismatches={mismatches}", f"non-empty={nonempty}"]
        assert checked == 1000 and mismatches == 0
        assert nonempty >= 100


# ---------------------------------------------------------------- 3


def test_matchmaking_oracle():
    detail = []
    with criterion(3, detail):
        totals = Counter()
        for seed in range(5):
            totals.update(matchmaking_run(seed, n_jobs=50, n_ces=20))
        bad, jobs = 0, 0
        for seed in range(5):
            b, n = elaboration_run(seed)
            bad, jobs = bad + b, jobs + n
        detail += [f"polls={totals['polls']}", f"checks={totals['eligibility_checks']}",
                   f"assigned={totals['assigned']}", f"mismatches={totals['mismatches'] + bad}"]
        assert totals["mismatches"] == 0 and bad == 0
        assert 0 < totals["eligible_pairs"] < totals["eligibility_checks"]
        assert totals["assigned"] > 0


# ---------------------------------------------------------------- 4


def _snapshot(cat, queries):
    looks = {}
    for path, _ in cat.walk():
        for who in PRINCIPALS[:3]:
            try:
                looks[f"{who.user}:{path}"] = cat.lookup(path, who, follow=False).to_dict()
            except Exception as exc:  # noqa: BLE001 - the error kind is part of what must not change
                looks[f"{who.user}:{path}"] = type(exc).__name__
    finds = [cat.find(q, who) for q in queries for who in PRINCIPALS]
    return json.dumps([looks, finds], sort_keys=True).encode()


def test_shard_transparency():
    detail = []
    with criterion(4, detail):
        cat = random_catalogue(2000, 44)
        scan = FullScan(cat)
        files = [p for p, e in scan.entries.items() if e.kind == "file"]
        dirs = [p for p, e in scan.entries.items() if e.is_dir and p != "/"]
        rng = random.Random(44)
        queries = [query_text(*random_query(rng, files, cat)) for _ in range(30)]
        before = _snapshot(cat, queries)
        probe = queries[:5]
        probe_before = [cat.find(q, ADMIN) for q in probe]
        shards = set()
        for _ in range(100):
            shard = f"shard{rng.randint(0, 7)}"
            cat.move_subtree_to_shard(rng.choice(dirs), shard, ADMIN)
            shards.add(shard)
            assert [cat.find(q, ADMIN) for q in probe] == probe_before
        detail += ["reshards=100", f"shards used={len(shards)}"]
        assert _snapshot(cat, queries) == before


# ---------------------------------------------------------------- 5


def test_fault_tolerance():
    detail = []
    with criterion(5, detail):
        text, trace, _ = first_run("fault_tolerance.yaml")
        m = json.loads(text)
        crashed = {line.split()[2] for line in trace.splitlines() if re.search(r" fault CE\d+ crash$", line)}
        states = job_states(trace)
        twice = [j for j, seq in states.items() if seq.count("DONE") > 1]
        requeued = sum(1 for seq in states.values() if "ZOMBIE" in seq)
        detail += [f"crashed CEs={len(crashed)}/12", f"requeued jobs={requeued}",
                   f"validated={m['jobs'].get('VALIDATED', 0)}/{m['jobs']['total']}"]
        assert len(crashed) == 6
        assert requeued > 0 and not twice
        assert m["finished"] and m["jobs"].get("VALIDATED") == m["jobs"]["total"] == 240
        assert all(seq[-1] == "VALIDATED" for seq in states.values())


# ---------------------------------------------------------------- 6


def test_optimizer_unblocks():
    detail = []
    with criterion(6, detail):
        on, trace, _ = first_run("optimizer_unblock.yaml")
        off, _, _ = first_run("optimizer_disabled.yaml")
        on, off = json.loads(on), json.loads(off)
        detail += [f"optimizer transfers={on['optimizer_transfers']}",
                   f"validated={on['jobs'].get('VALIDATED', 0)}/{on['jobs']['total']}",
                   f"control stalled={off['stalled']}"]
        assert on["optimizer_transfers"] >= 1 and on["jobs"].get("VALIDATED") == on["jobs"]["total"] == 8
        assert off["stalled"] and off["jobs"].get("VALIDATED", 0) == 0 and off["optimizer_transfers"] == 0
        lines = trace.splitlines()
        first_transfer_done = next(i for i, line in enumerate(lines) if re.search(r" transfer \d+ DONE", line))
        first_run_line = next(i for i, line in enumerate(lines) if re.search(r" job \d+ RUNNING", line))
        assert first_transfer_done < first_run_line


# ---------------------------------------------------------------- 7


def test_analysis_partition_invariance():
    detail = []
    with criterion(7, detail):
        sim = Simulation(load_scenario(SCEN / "analysis.yaml"))
        m = sim.run()
        grid = sim.runtimes["main"].grid
        client = Analysis(grid, grid.principal("alice"))
        digests, counts = {}, {}
        for tag in ("pt-h1", "pt-h2", "pt-h5", "rows-h1", "rows-h5"):
            task = client.load(tag)
            counts[tag] = len(task.subjobs)
            client.collect_merge(task)
            name = "histo.json" if tag.startswith("pt") else "rows.json"
            digests[tag] = grid.fetch(f"{task.task_dir}/merged/{name}", ADMIN).digest
        detail += ["sub-jobs " + " ".join(f"{k}={v}" for k, v in counts.items())]
        assert m.jobs.get("VALIDATED") == m.jobs["total"]
        assert counts["pt-h5"] > counts["pt-h1"]
        assert digests["pt-h1"] == digests["pt-h2"] == digests["pt-h5"]
        assert digests["rows-h1"] == digests["rows-h5"]


# ---------------------------------------------------------------- 8


def test_package_reinstall():
    detail = []
    with criterion(8, detail):
        metrics, trace, repo = reinstall_run()
        _, _, untouched = reinstall_run(remove_at=None)
        log = [e[0] + " " + e[1] for e in repo.install_log]
        detail += ["log: " + ", ".join(log)]
        assert metrics.jobs == {"total": 2, "VALIDATED": 2}
        assert log == ["install ROOT", "install AliRoot", "remove ROOT", "install ROOT"]
        assert repo.installed == untouched.installed and repo.refs() == untouched.refs()


# ---------------------------------------------------------------- 9


def test_federation_transparency():
    detail = []
    with criterion(9, detail):
        runs = {levels: output_digests(levels) for levels in (0, 1, 2)}
        detail += [f"outputs={len(runs[0][0])}"]
        for levels, (digests, metrics) in runs.items():
            assert metrics.jobs.get("VALIDATED") == metrics.jobs["total"] > 0, levels
        assert runs[0][0] and runs[0][0] == runs[1][0] == runs[2][0]


# ---------------------------------------------------------------- 10


@pytest.mark.slow
def test_determinism():
    detail = []
    with criterion(10, detail):
        for name in RUNNABLE:
            text, trace, _ = first_run(name)
            again, trace2 = run_scenario(SCEN / name)
            assert trace2 == trace, name
            assert again.to_json() == text, name
        detail += [f"scenarios={len(RUNNABLE)}"]


if __name__ == "__main__":
    import sys

    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
