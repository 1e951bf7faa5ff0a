"""Append-only operation journal with periodic snapshots.

On disk a journal is JSON lines: a header line, then one record per line,
each carrying a monotonically increasing ``seq``.  A snapshot file stores the
full service state together with the ``seq`` it covers; recovery loads the
snapshot and replays only the records after it.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .errors import ParseError

FORMAT_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Journal:
    def __init__(self, kind: str, path: str | os.PathLike | None = None, snapshot_every: int = 0):
        self.kind = kind
        self.path = Path(path) if path is not None else None
        self.snapshot_every = snapshot_every
        self.records: list[dict] = []
        self.seq = 0
        self._fh = None
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(_dumps(self.header()) + "\n")

    def header(self) -> dict:
        return {"format": "minigrid-journal", "kind": self.kind, "version": FORMAT_VERSION}

    @property
    def snapshot_path(self) -> Path | None:
        return None if self.path is None else self.path.with_suffix(self.path.suffix + ".snap")

    def append(self, record: dict) -> int:
        self.seq += 1
        rec = dict(record, seq=self.seq)
        self.records.append(rec)
        if self.path is not None:
            if self._fh is None:
                self._fh = open(self.path, "a")
            self._fh.write(_dumps(rec) + "\n")
            self._fh.flush()
        return self.seq

    def tail(self, after: int = 0) -> list[dict]:
        return [r for r in self.records if r["seq"] > after]

    def write_snapshot(self, state: dict):
        if self.snapshot_path is None:
            return
        doc = {"format": "minigrid-snapshot", "kind": self.kind, "version": FORMAT_VERSION, "seq": self.seq, "state": state}
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(_dumps(doc))
        os.replace(tmp, self.snapshot_path)

    def due_for_snapshot(self) -> bool:
        return bool(self.snapshot_every) and self.seq % self.snapshot_every == 0

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @classmethod
    def open(cls, kind: str, path, snapshot_every: int = 0) -> tuple["Journal", dict | None, list[dict]]:
        """Reopen an on-disk journal.

        Returns the journal (positioned for further appends), the snapshot state
        (or None) and the records that must be replayed on top of it.
        """
        path = Path(path)
        j = cls(kind, path, snapshot_every)
        snap_state, snap_seq = None, 0
        if j.snapshot_path.exists():
            doc = json.loads(j.snapshot_path.read_text())
            _check(doc, "minigrid-snapshot", kind, j.snapshot_path)
            snap_state, snap_seq = doc["state"], doc["seq"]
        lines = path.read_text().splitlines()
        if not lines:
            raise ParseError(f"{path}: empty journal")
        _check(json.loads(lines[0]), "minigrid-journal", kind, path)
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: corrupt record", lineno, exc.colno) from None
            j.records.append(rec)
            j.seq = rec["seq"]
        return j, snap_state, [r for r in j.records if r["seq"] > snap_seq]


def _check(doc: dict, fmt: str, kind: str, where):
    if doc.get("format") != fmt or doc.get("kind") != kind:
        raise ParseError(f"{where}: not a {kind} {fmt} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ParseError(f"{where}: unsupported format version {doc.get('version')}")
