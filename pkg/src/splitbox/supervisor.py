"""User-notification supervisor: the dynamic half of the enforcement split.

One receiver per sandbox dequeues held syscalls and dispatches them to
handlers on a small worker pool (per-task ordering preserved). Replies are
exactly-once; handler failures deny rather than allow; a syscall whose
pointer arguments were read from child memory is never continued into the
kernel unless the handler holds one of the two sanctioned exemptions
(exec under a freeze scope, clone3 flag inspection).
"""

from __future__ import annotations

import collections
import errno
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .kernel import linux
from .kernel.seccomp import Notification, StaleNotification

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Verdict:
    """Supervisor reply to one held syscall."""

    kind: str  # allow | deny | emulate
    errno_value: int = 0
    value: int = 0
    inject_fd: int | None = None  # supervisor fd to dup into the child
    inject_cloexec: bool = False

    @staticmethod
    def allow() -> "Verdict":
        return Verdict("allow")

    @staticmethod
    def deny(err: int) -> "Verdict":
        return Verdict("deny", errno_value=err)

    @staticmethod
    def emulate(value: int = 0, err: int = 0) -> "Verdict":
        return Verdict("emulate", value=value, errno_value=err)

    @staticmethod
    def emulate_fd(fd: int, cloexec: bool = False) -> "Verdict":
        return Verdict("emulate", inject_fd=fd, inject_cloexec=cloexec)


Handler = Callable[[Notification, "SupervisorState"], Verdict]


class HandlerTable:
    """Syscall name -> handler. Notified syscalls without a handler are
    denied: interception without a decision is always a deny."""

    def __init__(self, handlers: Mapping[str, Handler] | None = None):
        self._handlers: dict[str, Handler] = dict(handlers or {})

    def register(self, syscall: str, handler: Handler) -> None:
        self._handlers[syscall] = handler

    def get(self, syscall: str) -> Handler | None:
        return self._handlers.get(syscall)

    def __contains__(self, syscall: str) -> bool:
        return syscall in self._handlers


@dataclass
class SupervisorStats:
    received: int = 0
    replied: int = 0
    stale_dropped: int = 0
    denials: int = 0
    by_syscall: collections.Counter = field(default_factory=collections.Counter)

    def snapshot(self) -> dict:
        return {
            "received": self.received,
            "replied": self.replied,
            "stale_dropped": self.stale_dropped,
            "denials": self.denials,
            "by_syscall": dict(self.by_syscall),
        }


@dataclass
class TerminationReport:
    stats: SupervisorStats
    handler_errors: list[str]


class SupervisorState:
    """Shared mutable state the handlers consult: live policy tables,
    resource ledger, COW workspace, hook runtime, audit sink.

    Live tables are swapped atomically (assignment under the GIL) so the hot
    path reads a consistent snapshot without taking the update lock.
    """

    def __init__(self, plan, *, path_policy=None, workspace=None, vfs=None,
                 net=None, ledger=None, hook=None, audit=None):
        self.plan = plan
        self.path_policy = path_policy
        self.workspace = workspace
        self.vfs = vfs
        self.net = net
        self.ledger = ledger
        self.hook = hook
        self.audit = audit
        self.update_lock = threading.Lock()
        self.stats = SupervisorStats()
        self.child_pid: int | None = None
        self.pgid: int | None = None
        self.handler_errors: list[str] = []

    def tgid_of(self, tid: int) -> int:
        return linux.tgid_of(tid)


class Supervisor:
    """Event loop bound to one sandbox's notification channel."""

    def __init__(self, channel, handlers: HandlerTable, state: SupervisorState,
                 workers: int = 8):
        self.channel = channel
        self.handlers = handlers
        self.state = state
        self._pool = ThreadPoolExecutor(max_workers=workers,
                                        thread_name_prefix="sbx-handler")
        self._per_task: dict[int, collections.deque] = {}
        self._lock = threading.Lock()
        self._thread: threading.Thread | None = None
        self._done = threading.Event()
        self.report: TerminationReport | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self.run_loop,
                                        name="sbx-notify-recv", daemon=True)
        self._thread.start()

    def run_loop(self) -> TerminationReport:
        """Dequeue until the channel closes (child tree exited)."""
        try:
            while True:
                notif = self.channel.recv()
                if notif is None:
                    break
                self.state.stats.received += 1
                self.state.stats.by_syscall[notif.syscall] += 1
                self._enqueue(notif)
        finally:
            self._pool.shutdown(wait=True)
            self.report = TerminationReport(self.state.stats,
                                            self.state.handler_errors)
            self._done.set()
        return self.report

    def wait(self, timeout: float | None = None) -> TerminationReport | None:
        self._done.wait(timeout)
        return self.report

    def _enqueue(self, notif: Notification) -> None:
        # Handlers may block (policy_fn holds, on-behalf connects); unrelated
        # tasks' notifications must keep flowing. Order is preserved per
        # child task, concurrency happens across tasks.
        with self._lock:
            queue = self._per_task.get(notif.pid)
            if queue is not None:
                queue.append(notif)
                return
            self._per_task[notif.pid] = collections.deque()
        self._pool.submit(self._run_task, notif.pid, notif)

    def _run_task(self, tid: int, notif: Notification) -> None:
        while True:
            self._handle_one(notif)
            with self._lock:
                queue = self._per_task[tid]
                if not queue:
                    del self._per_task[tid]
                    return
                notif = queue.popleft()

    def _handle_one(self, notif: Notification) -> None:
        try:
            handler = self.handlers.get(notif.syscall)
            if handler is None:
                verdict = Verdict.deny(errno.EPERM)
            else:
                verdict = handler(notif, self.state)
        except StaleNotification:
            self.state.stats.stale_dropped += 1
            return
        except Exception as exc:  # fail closed, never allow on error
            log.exception("handler for %s failed", notif.syscall)
            self.state.handler_errors.append(f"{notif.syscall}: {exc!r}")
            verdict = Verdict.deny(errno.EPERM)
        self._apply(notif, verdict)

    def _apply(self, notif: Notification, verdict: Verdict) -> None:
        if verdict.kind == "allow":
            if notif.memory_passes > 0 and not notif.continue_after_read_ok:
                # Continuing would let the kernel re-read memory we validated.
                log.error("refusing to continue %s after memory read",
                          notif.syscall)
                self.state.handler_errors.append(
                    f"{notif.syscall}: continue-after-read refused")
                verdict = Verdict.deny(errno.EPERM)
            else:
                self._reply(notif, continue_syscall=True)
                return
        if verdict.kind == "deny":
            self.state.stats.denials += 1
            self._reply(notif, error=-verdict.errno_value)
            return
        # emulate
        if verdict.inject_fd is not None:
            try:
                childfd = self.channel.add_fd(notif, verdict.inject_fd,
                                              cloexec=verdict.inject_cloexec)
            except StaleNotification:
                self.state.stats.stale_dropped += 1
                return
            except OSError as exc:
                # Injection hit the child's own limits (EMFILE under a
                # descriptor cap); that errno belongs to the child.
                self._reply(notif, error=-(exc.errno or errno.EIO))
                return
            finally:
                try:
                    os.close(verdict.inject_fd)
                except OSError:
                    pass
            self._reply(notif, val=childfd)
            return
        err = -verdict.errno_value if verdict.errno_value else 0
        self._reply(notif, val=verdict.value, error=err)

    def _reply(self, notif: Notification, val: int = 0, error: int = 0,
               continue_syscall: bool = False) -> None:
        ok = self.channel.reply(notif.id, val=val, error=error,
                                continue_syscall=continue_syscall)
        if ok:
            self.state.stats.replied += 1
        else:
            self.state.stats.stale_dropped += 1


def grab_child_fd(notif: Notification, fd_index: int) -> int:
    """Dup the child's descriptor into this process via pidfd transfer.

    The dup shares the open file description, so connecting or binding it
    acts on the child's own socket. Raises OSError(EBADF) when the
    descriptor vanished.
    """
    try:
        return linux.grab_fd(notif.pid, fd_index)
    except OSError as exc:
        raise OSError(errno.EBADF, f"child fd {fd_index} vanished") from exc
