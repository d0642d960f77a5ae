"""JSONL event/verdict protocol for out-of-process policy callbacks.

Events go out on one descriptor, verdicts come back on another; one request
is in flight at a time (callbacks are serialized per sandbox anyway). A
verdict message may carry tightening commands, which are applied to the
live context before the verdict is returned. This is the surface foreign
bindings use to host a policy callback without running in this process.

Event:   {"id": 1, "syscall": "execve", "category": "exec", "pid": ...,
          "ppid": ..., "argv": [...], "net": {...}}
Verdict: {"id": 1, "verdict": 0 | true | 13 | "audit",
          "restrict_network": [...], "deny_path": "/p",
          "tighten_resources": {...}}
"""

from __future__ import annotations

import json
import logging
import os
import threading

log = logging.getLogger(__name__)


class WireCallback:
    """Adapts the (event, ctx) callback contract onto a descriptor pair."""

    def __init__(self, events_fd: int, verdicts_fd: int):
        self._events = os.fdopen(os.dup(events_fd), "w", buffering=1)
        self._verdicts = os.fdopen(os.dup(verdicts_fd), "r", buffering=1)
        self._seq = 0
        self._lock = threading.Lock()

    def __call__(self, event, ctx):
        with self._lock:
            self._seq += 1
            seq = self._seq
            wire = {"id": seq, **event.to_wire()}
            self._events.write(json.dumps(wire) + "\n")
            self._events.flush()
            while True:
                line = self._verdicts.readline()
                if not line:
                    raise ConnectionError("verdict stream closed")
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"bad verdict line: {line!r}") from exc
                if msg.get("id") != seq:
                    continue
                break
        if "restrict_network" in msg:
            ctx.restrict_network(msg["restrict_network"])
        if "deny_path" in msg:
            ctx.deny_path(msg["deny_path"])
        if "tighten_resources" in msg:
            ctx.tighten_resources(msg["tighten_resources"])
        return msg.get("verdict", 0)

    def close(self) -> None:
        try:
            self._events.close()
        except OSError:
            pass
        try:
            self._verdicts.close()
        except OSError:
            pass
