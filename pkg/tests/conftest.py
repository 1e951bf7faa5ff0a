from __future__ import annotations

import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from minigrid import config as vo_config
from minigrid.grid import Grid

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


class Clock:
    """Hand-cranked clock for unit tests."""

    def __init__(self, t: float = 0.0):
        self.t = t

    def __call__(self) -> float:
        return self.t

    def advance(self, dt: float):
        self.t += dt


@pytest.fixture
def small_vo():
    return vo_config.load(SCENARIOS / "small_vo.yaml")


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def grid(small_vo, clock):
    return Grid(small_vo, clock=clock)


@pytest.fixture
def make_grid(clock):
    def make(doc_or_cfg=None, **kw):
        cfg = doc_or_cfg
        if cfg is None:
            cfg = vo_config.load(SCENARIOS / "small_vo.yaml")
        elif isinstance(cfg, dict):
            cfg = vo_config.from_dict(cfg)
        return Grid(cfg, clock=kw.pop("clock", clock), **kw)

    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
