from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from minigrid.config import PackageSpec, version_key
from minigrid.errors import CycleDetected, NotFound, NotInstalled, UnknownPackage, VersionConflict
from minigrid.packages import Resolver, SiteRepo, install, remove

from .generators import random_packages
from .harness import reinstall_run
from .oracles import is_topological, reachable


def P(name, version, *deps, setup=()):
    parsed = tuple((d.split("::")[0], d.split("::")[1] if "::" in d else None) for d in deps)
    return (name, version), PackageSpec(name, version, parsed, tuple(setup))


ALICE_SET = dict([
    P("ROOT", "3.02"), P("ROOT", "3.10"), P("ROOT", "3.9"),
    P("GEANT", "3.21"), P("GEANT", "4.0"),
    P("AliRoot", "3.05", "ROOT", "GEANT::3.21", setup=["ALICE_ROOT=/opt/aliroot"]),
    P("Lone", "1.0"),
])


def refs(plan):
    return [p.ref for p in plan]


def test_aliroot_plan():
    plan = Resolver(ALICE_SET).resolve(["AliRoot::3.05"])
    assert refs(plan) == ["GEANT::3.21", "ROOT::3.10", "AliRoot::3.05"]
    assert plan.index(ALICE_SET[("ROOT", "3.10")]) < plan.index(ALICE_SET[("AliRoot", "3.05")])


def test_single_package_plan():
    assert refs(Resolver(ALICE_SET).resolve(["Lone"])) == ["Lone::1.0"]


def test_versions_compare_numerically():
    assert version_key("3.10") > version_key("3.9") > version_key("3.02")
    assert refs(Resolver(ALICE_SET).resolve(["ROOT"])) == ["ROOT::3.10"]


def test_exact_pin_overrides_any():
    plan = Resolver(ALICE_SET).resolve(["AliRoot", "ROOT::3.02"])
    assert "ROOT::3.02" in refs(plan) and "ROOT::3.10" not in refs(plan)


def test_resolution_errors():
    r = Resolver(ALICE_SET)
    with pytest.raises(UnknownPackage):
        r.resolve(["Nope"])
    with pytest.raises(UnknownPackage):
        r.resolve(["ROOT::9.9"])
    with pytest.raises(VersionConflict):
        r.resolve(["ROOT::3.02", "ROOT::3.10"])
    with pytest.raises(VersionConflict):
        r.resolve(["AliRoot", "GEANT::4.0"])
    cyclic = dict([P("A", "1", "B"), P("B", "1", "A")])
    with pytest.raises(CycleDetected):
        Resolver(cyclic).resolve(["A"])


def test_missing_tarball_detected():
    pkgs = {("T", "1"): PackageSpec("T", "1", (), (), "/vo/packages/T-1.tgz")}
    with pytest.raises(NotFound):
        Resolver(pkgs, lfn_exists=lambda lfn: False).resolve(["T"])
    assert refs(Resolver(pkgs, lfn_exists=lambda lfn: True).resolve(["T"])) == ["T::1"]


@given(st.integers(0, 10**9))
def test_random_dags_resolve_to_reachable_set_in_topological_order(seed):
    rng = random.Random(seed)
    pkgs = random_packages(rng, rng.randint(2, 8))
    names = sorted({n for n, _ in pkgs})
    roots = [(n, None) for n in rng.sample(names, rng.randint(1, len(names)))]
    plan = Resolver(pkgs).resolve([n for n, _ in roots])
    assert {(p.name, p.version) for p in plan} == reachable(pkgs, roots)
    assert is_topological(plan, pkgs)
    assert plan == Resolver(dict(reversed(list(pkgs.items())))).resolve([n for n, _ in reversed(roots)])


def test_install_is_idempotent_and_logs_setup_in_order():
    repo = SiteRepo("cern")
    plan = Resolver(ALICE_SET).resolve(["AliRoot"])
    assert install(plan, repo) == plan
    log = list(repo.install_log)
    assert [e[1] for e in log] == ["GEANT", "ROOT", "AliRoot"]
    assert log[-1][3] == ("ALICE_ROOT=/opt/aliroot",)
    assert install(plan, repo) == []
    assert repo.install_log == log


def test_partial_removal_reinstalls_only_the_gap():
    repo = SiteRepo("cern")
    plan = Resolver(ALICE_SET).resolve(["AliRoot"])
    install(plan, repo)
    remove("ROOT", "3.10", repo)
    assert refs(install(plan, repo)) == ["ROOT::3.10"]
    with pytest.raises(NotInstalled):
        remove("GEANT", "4.0", repo)


def _closed(repo, pkgs):
    names = {}
    for n, v in repo.installed:
        names.setdefault(n, set()).add(v)
    for key in repo.installed:
        for dn, dv in pkgs[key].depends:
            if dn not in names or (dv is not None and dv not in names[dn]):
                return False
    return True


@given(st.integers(0, 10**9))
def test_remove_then_reinstall_equals_fresh_install(seed):
    rng = random.Random(seed)
    pkgs = random_packages(rng, 6)
    names = sorted({n for n, _ in pkgs})
    plan = Resolver(pkgs).resolve(rng.sample(names, 3))
    fresh = SiteRepo("a")
    install(plan, fresh)
    assert _closed(fresh, pkgs)
    repo = SiteRepo("b")
    install(plan, repo)
    for spec in rng.sample(plan, rng.randint(0, len(plan))):
        remove(spec.name, spec.version, repo)
    install(plan, repo)
    assert repo.installed == fresh.installed
    assert repo.refs() == fresh.refs()


def test_site_reinstalls_removed_package_before_the_next_job():
    metrics, trace, repo = reinstall_run()
    assert metrics.jobs == {"total": 2, "VALIDATED": 2}
    assert [e[:3] for e in repo.install_log] == [
        ("install", "ROOT", "3.02"), ("install", "AliRoot", "3.05"),
        ("remove", "ROOT", "3.02"), ("install", "ROOT", "3.02")]
    second = trace.index(next(line for line in trace if line.endswith("job 2 RUNNING")))
    reinstall = [i for i, line in enumerate(trace) if line.endswith("install CE_CERN ROOT::3.02")]
    assert len(reinstall) == 2 and reinstall[1] < second


def test_untouched_site_installs_once():
    _, trace, repo = reinstall_run(remove_at=None)
    assert sum("install CE_CERN" in line for line in trace) == 2
    assert repo.refs() == ["AliRoot::3.05", "ROOT::3.02"]
