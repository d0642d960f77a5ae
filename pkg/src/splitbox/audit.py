"""Line-delimited audit records: HTTP decisions, hook flags, denials."""

from __future__ import annotations

import json
import threading
import time


class AuditLog:
    """Append-only JSONL sink; appends are serialized, entries are kept
    in memory for the sandbox result report as well."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(path, "a", buffering=1) if path else None

    def log(self, kind: str, **fields) -> dict:
        entry = {"ts": round(time.time(), 6), "kind": kind, **fields}
        with self._lock:
            self.entries.append(entry)
            if self._fh:
                self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None

    def of_kind(self, kind: str) -> list[dict]:
        with self._lock:
            return [e for e in self.entries if e["kind"] == kind]
