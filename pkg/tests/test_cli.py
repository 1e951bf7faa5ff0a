from __future__ import annotations

import io
import json
from pathlib import Path

import pytest

from minigrid import cli
from minigrid import config as vo_config
from minigrid.auth import ADMIN
from minigrid.grid import Grid

ROOT = Path(__file__).resolve().parents[1]
SCEN = ROOT / "scenarios"
VO = str(SCEN / "small_vo.yaml")

SETUP = """\
mkdir -p /alice/sim/2001-01/V3.05
register /alice/sim/2001-01/V3.05/1.galice.root SE_CERN 100
register /alice/sim/2001-01/V3.05/2.galice.root SE_CERN 100
register /alice/sim/2001-01/V3.05/notes.txt SE_LYON 7
tag define /alice/sim/2001-01/V3.05 MonteCarlo npart:int energy:float
tag set /alice/sim/2001-01/V3.05/1.galice.root MonteCarlo npart=150 energy=5.5
tag set /alice/sim/2001-01/V3.05/2.galice.root MonteCarlo npart=50 energy=5.5
"""


def run(*argv, stdin: str = ""):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), io.StringIO(stdin), out, err)
    return code, out.getvalue(), err.getvalue()


def session(user="admin", **kw) -> cli.ShellSession:
    return cli.ShellSession(Grid(vo_config.load(VO)), user, **kw)


def script(sh: cli.ShellSession, text: str) -> list[cli.Result]:
    return [sh.run(argv) for argv in cli.split_commands(text)]


# ---------------------------------------------------------------- golden renderings


def test_golden_namespace_session():
    code, out, err = run("shell", "--vo", VO, stdin=SETUP + """\
find 'lfn:///alice/sim/2001*/V3.05%/*.*.root?MonteCarlo:npart>100'
ls -l /alice/sim/2001-01/V3.05
replicas /alice/sim/2001-01/V3.05/notes.txt
tag show /alice/sim/2001-01/V3.05
""")
    assert (code, err) == (0, "")
    assert out == (
        "/alice/sim/2001-01/V3.05/1.galice.root\n"
        "/alice/sim/2001-01/V3.05/2.galice.root\n"
        "/alice/sim/2001-01/V3.05/notes.txt\n"
        "/alice/sim/2001-01/V3.05/1.galice.root\n"
        "-rw-r--r-- admin admin 100 1.galice.root\n"
        "-rw-r--r-- admin admin 100 2.galice.root\n"
        "-rw-r--r-- admin admin 7 notes.txt\n"
        "SE_LYON sim /alice/sim/2001-01/V3.05/notes.txt\n"
        "MonteCarlo: npart:int energy:float\n"
        "  1.galice.root energy=5.5 npart=150\n"
        "  2.galice.root energy=5.5 npart=50\n"
    )


def test_whoami_pwd_and_home():
    sh = session("alice")
    assert sh.execute("whoami").out == "alice groups=alice roles=production\n"
    assert sh.execute("pwd").out == "/alice\n"
    script(sh, "cd /; cd")
    assert sh.cwd == "/alice"
    assert session().execute("pwd").out == "/\n"


def test_cd_nonexistent_keeps_cwd():
    sh = session()
    script(sh, "mkdir -p /a/b; cd /a")
    r = sh.execute("cd /nonexistent")
    assert r.code == cli.DOMAIN and r.err == "NotFound: /nonexistent\n"
    assert sh.cwd == "/a"
    r = script(sh, "register /a/f SE_CERN 1; cd f")[-1]
    assert r.code == cli.DOMAIN and r.err.startswith("NotADirectory") and sh.cwd == "/a"


def test_relative_paths_symlinks_and_moves():
    sh = session()
    results = script(sh, """\
mkdir -p /data/run1
cd /data
register run1/a.root SE_CERN 5
ln -s /data/run1 latest
mv run1/a.root run1/b.root
ls latest
""")
    assert all(r.code == 0 for r in results), [r.err for r in results]
    assert results[-1].out == "b.root\n"
    assert sh.execute("ln run1 x").code == cli.USAGE
    assert sh.cat.realpath("/data/latest/b.root", ADMIN) == "/data/run1/b.root"


def test_ps_matches_broker_dump_after_three_submissions(tmp_path):
    sh = session()
    jdl = tmp_path / "job.jdl"
    jdl.write_text('[ Executable = "aliroot"; OutputFiles = {"galice.root"}; ]')
    ids = [sh.execute(f"submit {jdl}").out for _ in range(3)]
    assert ids == ["1\n", "2\n", "3\n"]
    out = sh.execute("ps").out
    assert out == sh.grid.broker.dump()
    assert len(out.splitlines()) == 3


def test_submit_with_priority_and_priority_change(tmp_path):
    sh = session()
    jdl = tmp_path / "job.jdl"
    jdl.write_text('[ Executable = "aliroot"; ]')
    sh.execute(f"submit -p 4 {jdl}")
    assert sh.grid.broker.jobs[1].priority == 4
    assert sh.execute("priority 1 9").code == 0
    assert sh.grid.broker.jobs[1].priority == 9
    assert sh.execute("priority 1 nine").code == cli.USAGE


def test_kill_and_ps_all(tmp_path):
    sh = session()
    jdl = tmp_path / "job.jdl"
    jdl.write_text('[ Executable = "aliroot"; ]')
    sh.execute(f"submit {jdl}")
    sh.execute(f"submit {jdl}")
    assert sh.execute("kill 1").out == "killed 1\n"
    assert sh.execute("ps").out.splitlines()[0].startswith("2 ")
    assert len(sh.execute("ps -a").out.splitlines()) == 2
    assert sh.execute("kill 99").code == cli.DOMAIN


def test_transfer_and_top():
    sh = session()
    script(sh, "mkdir /d; register /d/f SE_CERN 10")
    assert sh.execute("transfer /d/f SE_LYON").out == "1\n"
    top = sh.execute("top").out
    assert top == ("time 0.000\n"
                   "jobs total=0\n"
                   "CE_CERN 0/2\n"
                   "CE_LYON 0/2\n"
                   "transfers INSERTED=1\n") or top.endswith("transfers WAITING=1\n")
    assert sh.execute("transfer /d/f SE_NOWHERE").code == cli.DOMAIN


def test_submit_rejects_missing_input(tmp_path):
    sh = session()
    jdl = tmp_path / "job.jdl"
    jdl.write_text('[ Executable = "aliroot"; InputData = {"/no/such/file"}; ]')
    r = sh.execute(f"submit {jdl}")
    assert r.code == cli.DOMAIN and r.err.startswith("NotFound") and not sh.grid.broker.jobs


def test_log_shows_elaboration_failure():
    sh = session()
    script(sh, "mkdir /d; register /d/in.root SE_CERN 10")
    jid = sh.grid.broker.submit('[ Executable = "aliroot"; InputData = {"/d/in.root"}; ]', ADMIN)
    assert sh.execute("rm /d/in.root").code == 0
    sh.grid.broker.elaborate(jid)
    out = sh.execute("log -e").out
    assert out and all(" error " in line for line in out.splitlines())
    assert sh.grid.broker.jobs[jid].state.value == "FAILED"
    assert sh.execute("log -n 0").out == ""


# ---------------------------------------------------------------- exit codes and error rendering


@pytest.mark.parametrize("line, code, prefix", [
    ("frobnicate", cli.USAGE, "usage: unknown command"),
    ("ls -z", cli.USAGE, "usage: ls"),
    ("register /x SE_CERN -4", cli.USAGE, "usage: register"),
    ("register /x SE_MARS 4", cli.DOMAIN, "UnknownSE"),
    ("mkdir /a/b/c", cli.DOMAIN, "NotFound"),
    ("replicas /missing", cli.DOMAIN, "NotFound"),
    ("tag define / T bad", cli.USAGE, "usage: tag define"),
    ("tag", cli.USAGE, "usage: tag"),
    ("find '/a?T:n>>1'", cli.DOMAIN, "ParseError"),
    ("echo 'unterminated", cli.USAGE, "usage:"),
    ("advance 10", cli.USAGE, "usage: advance"),
    ("analysis", cli.USAGE, "usage: analysis"),
    ("analysis status nosuch", cli.DOMAIN, ""),
])
def test_exit_codes(line, code, prefix):
    r = session().execute(line)
    assert r.code == code and r.out == ""
    assert r.err.startswith(prefix) and r.err.count("\n") == 1


def test_permission_denied_is_domain_error():
    code, out, err = run("shell", "--vo", VO, "--user", "bob", "-c", "mkdir /x")
    assert (code, out, err) == (1, "", "PermissionDenied: write permission denied on /\n")


def test_script_stops_at_first_error(tmp_path):
    path = tmp_path / "cmds.txt"
    path.write_text("mkdir /a\ncd /missing\nmkdir /b\n")
    state = tmp_path / "state"
    code, _, err = run("shell", "--state", str(state), "--vo", VO, str(path))
    assert code == 1 and err == "NotFound: /missing\n"
    code, out, _ = run("shell", "--state", str(state), "-c", "ls /")
    assert code == 0 and "a/" in out.splitlines() and "b/" not in out.splitlines()


def test_semicolons_and_comments_split_commands():
    assert cli.split_commands("pwd; ls -l  # trailing\n\n cd 'a;b'") == [["pwd"], ["ls", "-l"], ["cd", "a;b"]]


def test_missing_grid_is_usage_error(tmp_path):
    code, _, err = run("shell", "-c", "pwd")
    assert code == cli.USAGE and err.startswith("usage:")
    code, _, err = run("shell", "--state", str(tmp_path / "empty"), "-c", "pwd")
    assert code == cli.USAGE


def test_state_persists_between_invocations(tmp_path):
    state = str(tmp_path / "g")
    assert run("shell", "--state", state, "--vo", VO, stdin=SETUP)[0] == 0
    code, out, _ = run("shell", "--state", state, "-c", "find '/alice/sim/*/*/*.root?MonteCarlo:npart<100'")
    assert (code, out) == (0, "/alice/sim/2001-01/V3.05/2.galice.root\n")


# ---------------------------------------------------------------- structured output


def test_json_format_for_ps_and_top(tmp_path):
    jdl = tmp_path / "j.jdl"
    jdl.write_text('[ Executable = "aliroot"; ]')
    code, out, _ = run("shell", "--vo", VO, "--format", "json", "-c", f"submit {jdl}; submit {jdl}; ps; top")
    assert code == 0
    sub1, sub2, ps, top = (json.loads(x) for x in out.splitlines())
    assert (sub1, sub2) == ({"id": 1}, {"id": 2})
    assert [r["id"] for r in ps] == [1, 2] and {r["state"] for r in ps} == {"WAITING"}
    assert top["jobs"] == {"total": 2, "WAITING": 2}
    assert top["ces"]["CE_CERN"] == {"held": 0, "slots": 2}
    assert set(top) == {"time", "jobs", "ces", "transfers"}


def test_json_ls_rows():
    sh = session(fmt="json")
    script(sh, "mkdir /d; register /d/f SE_CERN 3")
    rows = json.loads(sh.execute("ls /d").out)
    assert rows == [{"name": "f", "kind": "file", "owner": "admin", "group": "admin", "perms": "644", "size": 3, "replicas": 1}]


# ---------------------------------------------------------------- live simulation


def test_live_analysis_session():
    sh_argv = ["shell", "--scenario", str(SCEN / "analysis.yaml"), "--user", "alice"]
    sel = "2001*/V3.05%/*.*.root?MonteCarlo:npart>100"
    code, out, err = run(*sh_argv, "-c", f"analysis spawn t1 --macro m --interpreter ana --dir /alice/sim "
                                          f"--select '{sel}' --hint 2 --output histo.json",
                         "-c", "advance 3000", "-c", "analysis status t1", "-c", "analysis merge t1")
    assert (code, err) == (0, "")
    lines = out.splitlines()
    assert lines[0] == "/alice/t1 2 sub-jobs: 1 2"
    assert lines[1] == "time 3000.000"
    assert lines[2] == "t1 VALIDATED=2"
    assert lines[5].startswith("histo.json histogram nbins=20 range=[0,1) entries=")
    assert sum(int(x) for x in lines[6].split()) == int(lines[5].rsplit("=", 1)[1])


def test_advance_rejects_negative_time():
    code, _, err = run("shell", "--scenario", str(SCEN / "analysis.yaml"), "-c", "advance -5")
    assert code == cli.USAGE and "forward" in err


# ---------------------------------------------------------------- simulate


def test_simulate_writes_trace_and_metrics(tmp_path):
    trace, metrics = tmp_path / "t.txt", tmp_path / "m.json"
    code, out, err = run("simulate", str(SCEN / "broker_restart.yaml"), "--trace", str(trace), "--metrics", str(metrics))
    assert (code, err) == (0, "")
    doc = json.loads(metrics.read_text())
    assert doc["scenario"] == "broker_restart" and doc["finished"] is True
    assert out.startswith("scenario broker_restart seed ")
    assert f"max_concurrent_running {doc['max_concurrent_running']}\n" in out
    assert trace.read_text().count(" VALIDATED") == doc["jobs"]["VALIDATED"]


def test_simulate_twice_is_identical(tmp_path):
    for i in (1, 2):
        run("simulate", str(SCEN / "fault_tolerance.yaml"), "--seed", "11",
            "--trace", str(tmp_path / f"t{i}"), "--metrics", str(tmp_path / f"m{i}"))
    assert (tmp_path / "t1").read_bytes() == (tmp_path / "t2").read_bytes()
    assert (tmp_path / "m1").read_bytes() == (tmp_path / "m2").read_bytes()


def test_simulate_json_format():
    code, out, _ = run("simulate", str(SCEN / "broker_restart.yaml"), "--format", "json", "--until", "500")
    doc = json.loads(out)
    assert code == 0 and doc["finished"] is False


def test_simulate_bad_scenario_names_line(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\nvo: {vo: x}\nworkload:\n  - {user: alice, jdl: '[ A = 1 ]', count: 1}\n  - {count: oops}\n")
    code, _, err = run("simulate", str(bad))
    assert code == cli.USAGE and "line" in err
    code, _, err = run("simulate", str(tmp_path / "absent.yaml"))
    assert code == cli.USAGE


def test_argparse_errors_are_usage():
    assert run("simulate")[0] == cli.USAGE
    assert run("simulate", "x.yaml", "--seed", "abc")[0] == cli.USAGE
