"""Programmable policy hook: held syscalls, host callback, live tightening.

Selected syscalls block until the host callback returns a verdict. Exec
events carry the argument vector, read under a freeze of every task that
could alias the child's memory, which is also what makes continuing the exec
race-free. Events never carry path strings: path control lives in the static
rules and in tightening updates. The context handle only tightens: the
permitted set after any update is a subset of the set before it.
"""

from __future__ import annotations

import errno
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass
from typing import Callable

from .kernel import linux
from .kernel.seccomp import Notification
from .policy import (EndpointRule, PolicyError, Protocol, ResourceLimits,
                     RuntimeHookConfig)
from .supervisor import SupervisorState, Verdict
from .tracer import FreezeUnavailable, TraceEngine

log = logging.getLogger(__name__)

VERDICT_ALLOW = "allow"
VERDICT_DENY = "deny"
VERDICT_AUDIT = "audit"


@dataclass(frozen=True)
class Event:
    """What a callback observes. No path strings, by schema."""

    syscall: str
    category: str  # exec | net | file
    pid: int
    ppid: int
    net_dest: tuple[str, str, int | None] | None = None  # (proto, ip, port)
    argv: tuple[str, ...] | None = None

    def argv_contains(self, needle: str) -> bool:
        return any(needle in part for part in self.argv or ())

    def to_wire(self) -> dict:
        wire = {"syscall": self.syscall, "category": self.category,
                "pid": self.pid, "ppid": self.ppid}
        if self.net_dest is not None:
            wire["net"] = {"protocol": self.net_dest[0], "ip": self.net_dest[1],
                           "port": self.net_dest[2]}
        if self.argv is not None:
            wire["argv"] = list(self.argv)
        return wire


def map_callback_return(value) -> tuple[str, int]:
    """Total mapping from callback returns to (verdict, errno).

    0/False/None allow; True/-1 deny EPERM; a positive integer denies with
    that errno; "audit" allows and flags; anything else fails closed.
    """
    if value is None or value is False or value == 0:
        return VERDICT_ALLOW, 0
    if value is True:
        return VERDICT_DENY, errno.EPERM
    if isinstance(value, int):
        if value == -1:
            return VERDICT_DENY, errno.EPERM
        if value > 0:
            return VERDICT_DENY, value
        return VERDICT_DENY, errno.EPERM
    if isinstance(value, str) and value == "audit":
        return VERDICT_AUDIT, 0
    return VERDICT_DENY, errno.EPERM


def _parse_endpoint(item) -> EndpointRule:
    if isinstance(item, EndpointRule):
        return item
    if isinstance(item, str):
        from .policyfile import parse_endpoint
        return parse_endpoint(item)
    raise PolicyError(f"cannot parse endpoint {item!r}")


class RuntimeContext:
    """Live-tightening handle passed to callbacks."""

    def __init__(self, state: SupervisorState):
        self._state = state

    def restrict_network(self, endpoints: list) -> None:
        """Keep only the listed endpoints (must already be permitted);
        an empty list revokes all egress."""
        rules = [_parse_endpoint(e) for e in endpoints]
        with self._state.update_lock:
            self._state.net = self._state.net.tightened(rules)

    def deny_path(self, path: str) -> None:
        with self._state.update_lock:
            self._state.path_policy = self._state.path_policy.with_denied(path)

    def tighten_resources(self, limits) -> None:
        if isinstance(limits, dict):
            limits = ResourceLimits(**limits)
        ledger = self._state.ledger
        if ledger is None:
            raise PolicyError("no resource ledger attached")
        with self._state.update_lock:
            if not limits.is_subset_of(ledger.limits):
                raise PolicyError(
                    "tightening may only lower limits; "
                    f"{limits} does not tighten {ledger.limits}")
            ledger.limits = limits


class HookRuntime:
    """Callback delivery, verdict mapping, freeze orchestration."""

    def __init__(self, config: RuntimeHookConfig,
                 callback: Callable | None,
                 state: SupervisorState,
                 engine: TraceEngine | None):
        self.config = config
        self.callback = callback
        self.state = state
        self.engine = engine
        self.ctx = RuntimeContext(state)
        self.audits: list[dict] = []
        self._serial = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=1,
                                            thread_name_prefix="sbx-policy-fn")

    def register_into(self, table) -> None:
        table.register("execve", self.handle_exec)
        table.register("execveat", self.handle_exec)

    # -- callback plumbing --------------------------------------------------

    def _invoke(self, event: Event) -> tuple[str, int]:
        if self.callback is None:
            return VERDICT_ALLOW, 0
        with self._serial:
            future = self._executor.submit(self.callback, event, self.ctx)
            try:
                value = future.result(self.config.hold_timeout)
            except FutureTimeout:
                self._flag(event, "hold-timeout")
                return VERDICT_DENY, errno.EPERM
            except Exception as exc:
                log.warning("policy callback raised: %r", exc)
                self._flag(event, f"callback-error: {exc!r}")
                return VERDICT_DENY, errno.EPERM
        verdict, err = map_callback_return(value)
        if verdict == VERDICT_AUDIT:
            self._flag(event, "audit")
        return verdict, err

    def _flag(self, event: Event, reason: str) -> None:
        entry = {"event": event.to_wire(), "flag": reason}
        self.audits.append(entry)
        if self.state.audit is not None:
            self.state.audit.log("hook", **entry)

    # -- event delivery -------------------------------------------------

    def deliver_net_event(self, notif: Notification, op: str,
                          dest) -> Verdict | None:
        if "net" not in self.config.categories or self.callback is None:
            return None
        wire_dest = None
        if dest is not None:
            proto, ip, port = dest
            wire_dest = (getattr(proto, "value", str(proto)), str(ip), port)
        event = Event(syscall=op, category="net", pid=notif.pid,
                      ppid=linux.ppid_of(notif.pid), net_dest=wire_dest)
        verdict, err = self._invoke(event)
        if verdict == VERDICT_DENY:
            return Verdict.deny(err)
        return None

    def deliver_file_event(self, notif: Notification, op: str,
                           ) -> Verdict | None:
        if "file" not in self.config.categories or self.callback is None:
            return None
        event = Event(syscall=op, category="file", pid=notif.pid,
                      ppid=linux.ppid_of(notif.pid))
        verdict, err = self._invoke(event)
        if verdict == VERDICT_DENY:
            return Verdict.deny(err)
        return None

    # -- exec holds ---------------------------------------------------------

    def handle_exec(self, notif: Notification, state: SupervisorState,
                    ) -> Verdict:
        if "exec" not in self.config.categories or self.callback is None:
            return Verdict.allow()
        if self.config.freeze_disabled or self.engine is None:
            # No freeze, no argv inspection: fail closed, never relax.
            self._flag(Event("execve", "exec", notif.pid, 0),
                       "freeze-unavailable")
            return Verdict.deny(errno.EPERM)
        try:
            scope = self.engine.freeze_aliases(notif.pid)
        except FreezeUnavailable as exc:
            self._flag(Event("execve", "exec", notif.pid, 0),
                       f"freeze-unavailable: {exc}")
            return Verdict.deny(errno.EPERM)
        try:
            argv_ptr = notif.args[1] if notif.syscall == "execve" \
                else notif.args[2]
            try:
                with state.channel.bracket(notif) as mem:
                    argv = tuple(os.fsdecode(a) for a in
                                 mem.c_string_vector(argv_ptr))
            except Exception:
                scope.release()
                return Verdict.deny(errno.EPERM)
            # The freeze is what makes continuing this exec race-free.
            notif.continue_after_read_ok = True
            event = Event(syscall=notif.syscall, category="exec",
                          pid=notif.pid, ppid=linux.ppid_of(notif.pid),
                          argv=argv)
            verdict, err = self._invoke(event)
            if verdict == VERDICT_DENY:
                scope.release()
                return Verdict.deny(err)
            self.engine.thaw_after_exec(scope)
            return Verdict.allow()
        except Exception:
            scope.release()
            raise

    def on_clone(self, notif: Notification, flags: int) -> Verdict | None:
        """Creation tracking happens in the tracer via auto-attach; the hook
        only vetoes when it cannot track at all."""
        return None

    def shutdown(self) -> None:
        self._executor.shutdown(wait=False)
