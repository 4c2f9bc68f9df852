"""Run event log: one JSON object per line, {phase, session, epoch, key, value}."""

from __future__ import annotations

import json


class EventLog:
    """Collects per-epoch records in memory and optionally appends to a JSONL file."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a") if path else None

    def emit(self, phase: str, session: int, epoch: int, key: str, value):
        record = {"phase": phase, "session": int(session), "epoch": int(epoch), "key": key, "value": value}
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def series(self, phase: str, key: str, session: int | None = None) -> list:
        return [
            r["value"]
            for r in self.records
            if r["phase"] == phase and r["key"] == key and (session is None or r["session"] == session)
        ]

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
