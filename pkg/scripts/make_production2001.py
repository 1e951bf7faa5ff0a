"""Generate the production-2001 VO config and scenario (30 sites x 15 slots, 6000 jobs).

    python3 scripts/make_production2001.py [--out scenarios]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import yaml

SITES = 30
SLOTS = 15
JOBS = 6000


def vo_config() -> dict:
    sites = {f"site{i:02d}": {} for i in range(SITES)}
    ses = {f"SE{i:02d}": {"site": f"site{i:02d}", "capacity": int(5e12)} for i in range(SITES)}
    ces = {
        f"CE{i:02d}": {"site": f"site{i:02d}", "max_slots": SLOTS, "close_se": [f"SE{i:02d}"]}
        for i in range(SITES)
    }
    return {
        "vo": "alice2001",
        "users": {"aliprod": {"groups": ["aliprod"], "roles": ["production"], "home": "/alice/production"}},
        "roles": ["production", "admin"],
        "sites": sites,
        "storage_elements": ses,
        "computing_elements": ces,
        "packages": [
            {"name": "ROOT", "version": "3.02", "setup": ["ROOTSYS=/opt/root/3.02"]},
            {"name": "AliRoot", "version": "3.05", "depends": ["ROOT::3.02"], "setup": ["ALICE_ROOT=/opt/aliroot/3.05"]},
        ],
        "commands": {
            "aliroot": {
                "version": "3.05",
                "depends": ["AliRoot::3.05"],
                "validation": "outputs_nonzero",
                "profile": {"kind": "produce", "duration": 7200, "jitter": 0.25,
                            "outputs": [{"name": "galice.root", "size": int(2e8)}]},
            }
        },
    }


def scenario() -> dict:
    jdl = ('[ Executable = "aliroot"; Arguments = {"--run", "2001", "--event", "{i}"}; '
           'OutputFiles = {"galice.root"}; OutputDir = "/alice/production/pbpb2001/{job_id}" ]')
    return {
        "name": "production2001",
        "description": "Pb+Pb production: 6000 jobs over 30 sites with 15 slots each (450 slots).",
        "seed": 2001,
        "vo": "production2001_vo.yaml",
        "settings": {"optimizer_interval": 600, "poll_interval": 60, "invariant_interval": 3600},
        "workload": [{"user": "aliprod", "count": JOBS, "jdl": jdl}],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = "# Generated by scripts/make_production2001.py; edit the script, not this file.\n"
    (out / "production2001_vo.yaml").write_text(header + yaml.safe_dump(vo_config(), sort_keys=False))
    (out / "production2001.yaml").write_text(header + yaml.safe_dump(scenario(), sort_keys=False, width=200))
    print(f"wrote {out / 'production2001_vo.yaml'} and {out / 'production2001.yaml'}")


if __name__ == "__main__":
    main()
