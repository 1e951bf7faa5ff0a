"""Deterministic stand-in for running a VO command on a worker node.

Outputs depend only on the command, its arguments and the digests of its
inputs, never on where or under which job id it runs.  That is what makes
a job's results identical whether it ran locally or through a federation
gateway.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass

from ..config import CommandSpec
from .storage import Blob


def _h(*parts) -> str:
    return hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).hexdigest()


def unit(*parts) -> float:
    """Uniform value in [0, 1) derived from ``parts``."""
    return int(_h(*parts)[:13], 16) / float(1 << 52)


@dataclass
class Outcome:
    ok: bool
    duration: float
    outputs: dict  # name -> Blob
    stdout: str
    stderr: str = ""


def samples(digest: str, macro: str, n: int, lo: float, hi: float) -> list[float]:
    """Event values ``macro`` extracts from the file with ``digest``."""
    rng = random.Random(f"{digest}:{macro}")
    return [lo + (hi - lo) * rng.betavariate(2.0, 2.0) for _ in range(n)]


def histogram_payload(values, nbins: int, lo: float, hi: float) -> bytes:
    counts = [0] * nbins
    under = over = 0
    width = (hi - lo) / nbins
    for v in values:
        if v < lo:
            under += 1
        elif v >= hi:
            over += 1
        else:
            counts[min(int((v - lo) / width), nbins - 1)] += 1
    doc = {"kind": "histogram", "nbins": nbins, "lo": lo, "hi": hi, "counts": counts, "underflow": under, "overflow": over}
    return json.dumps(doc, sort_keys=True).encode()


def records_payload(input_digests, macro: str, n: int, lo: float, hi: float) -> bytes:
    rows = []
    for d in input_digests:
        for i, v in enumerate(samples(d, macro, n, lo, hi)):
            rows.append({"key": f"{d[:16]}:{i:04d}", "value": round(v, 9)})
    return json.dumps({"kind": "records", "rows": rows}, sort_keys=True).encode()


def run_command(cmd: CommandSpec, args: list, input_digests: list[str], attempt_key: str = "") -> Outcome:
    p = cmd.profile
    key = (cmd.name, cmd.version, json.dumps(list(args)), ",".join(input_digests), p.seed)
    duration = p.duration * (1.0 + p.jitter * (2.0 * unit("dur", *key) - 1.0))
    if p.failure_rate and unit("fail", *key, attempt_key) < p.failure_rate:
        return Outcome(False, duration, {}, "", f"{cmd.name}: simulated failure")
    outputs = {}
    if p.kind == "produce":
        for name, size in p.outputs:
            outputs[name] = Blob(int(size), _h("out", *key, name))
    else:
        names = [n for n, _ in p.outputs] or ["result.json"]
        macro = str(args[0]) if args else cmd.name
        for name in names:
            if p.kind == "analysis":
                values = [v for d in input_digests for v in samples(d, macro, p.samples_per_file, p.lo, p.hi)]
                outputs[name] = Blob.of(histogram_payload(values, p.nbins, p.lo, p.hi))
            elif p.kind == "records":
                outputs[name] = Blob.of(records_payload(input_digests, macro, p.samples_per_file, p.lo, p.hi))
            else:
                raise ValueError(f"unknown profile kind {p.kind!r}")
    stdout = f"{cmd.name}::{cmd.version} {' '.join(map(str, args))}\nread {len(input_digests)} file(s)\nwrote {', '.join(sorted(outputs))}\n"
    return Outcome(True, duration, outputs, stdout)
