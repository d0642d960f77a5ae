"""In-memory twins of the kernel interfaces, for tests on any platform.

FakeChannel mimics the notification fd protocol: tests inject syscalls with
fake child memory, handlers run unchanged, replies are captured. Memory
mutation hooks simulate TOCTOU racers; stale flags simulate a child dying
between the validity brackets. FakeLaunchRecorder stands in for the child
side of the confinement pipeline so step ordering is assertable without
forking.
"""

from __future__ import annotations

import itertools
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable

from . import abi
from .seccomp import MemoryBracket, Notification, StaleNotification


@dataclass
class FakeReply:
    val: int = 0
    error: int = 0
    continued: bool = False
    injected_fds: list[int] = field(default_factory=list)
    dropped_stale: bool = False


class FakeChannel:
    """Drop-in for NotifyChannel backed by queues and dict memory."""

    def __init__(self):
        self._queue: "queue.Queue[Notification | None]" = queue.Queue()
        self._ids = itertools.count(1)
        self._replies: dict[int, FakeReply] = {}
        self._reply_events: dict[int, threading.Event] = {}
        self._memory: dict[int, dict[int, bytes]] = {}
        self._stale: set[int] = set()
        self._stale_after_read: set[int] = set()
        self._after_first_read: dict[int, Callable[[dict[int, bytes]], None]] = {}
        self._next_child_fd = itertools.count(10)
        self.fd = -1
        self.child_pid = 0

    # -- test-side API -------------------------------------------------

    def inject(self, syscall: str, args: tuple[int, ...] = (0,) * 6,
               pid: int = 1000, memory: dict[int, bytes] | None = None,
               stale: bool = False, stale_after_read: bool = False,
               after_first_read: Callable[[dict[int, bytes]], None] | None = None,
               ) -> int:
        """Queue one notification; returns its cookie."""
        nid = next(self._ids)
        notif = Notification(
            id=nid, pid=pid, syscall_nr=abi.SYS.get(syscall, -1),
            syscall=syscall, args=tuple(args) + (0,) * (6 - len(args)))
        self._memory[nid] = dict(memory or {})
        if stale:
            self._stale.add(nid)
        if stale_after_read:
            self._stale_after_read.add(nid)
        if after_first_read:
            self._after_first_read[nid] = after_first_read
        self._reply_events[nid] = threading.Event()
        self._queue.put(notif)
        return nid

    def close_input(self) -> None:
        """Simulate the child tree exiting: recv() returns None."""
        self._queue.put(None)

    def wait_reply(self, nid: int, timeout: float = 5.0) -> FakeReply:
        if not self._reply_events[nid].wait(timeout):
            raise TimeoutError(f"no reply for notification {nid}")
        return self._replies[nid]

    # -- channel protocol ------------------------------------------------

    def recv(self) -> Notification | None:
        return self._queue.get()

    def id_valid(self, nid: int) -> bool:
        return nid not in self._stale

    def bracket(self, notif: Notification) -> MemoryBracket:
        if notif.memory_passes >= 1:
            raise AssertionError(
                f"second memory pass for held {notif.syscall}")
        notif.memory_passes += 1
        return MemoryBracket(self, notif)

    def _raw_read(self, notif: Notification, address: int, length: int) -> bytes:
        blob = self._memory.get(notif.id, {}).get(address, b"")
        return blob[:length]

    def _post_read_hook(self, notif: Notification) -> None:
        mem = self._memory.get(notif.id, {})
        hook = self._after_first_read.pop(notif.id, None)
        if hook:
            hook(mem)
        if notif.id in self._stale_after_read:
            self._stale.add(notif.id)

    def read_memory(self, notif: Notification,
                    reads: list[tuple[int, int]]) -> list[bytes]:
        with self.bracket(notif) as mem:
            return [mem.read(address, length) for address, length in reads]

    def read_c_string(self, notif: Notification, address: int,
                      max_len: int = 4096) -> bytes:
        with self.bracket(notif) as mem:
            return mem.c_string(address, max_len)

    def write_memory(self, notif: Notification, address: int,
                     data: bytes) -> None:
        if not self.id_valid(notif.id):
            raise StaleNotification(notif.id)
        self._memory.setdefault(notif.id, {})[address] = data

    def written(self, nid: int, address: int) -> bytes | None:
        return self._memory.get(nid, {}).get(address)

    def add_fd(self, notif: Notification, srcfd: int,
               cloexec: bool = False) -> int:
        if not self.id_valid(notif.id):
            raise StaleNotification(notif.id)
        childfd = next(self._next_child_fd)
        reply = self._replies.setdefault(notif.id, FakeReply())
        reply.injected_fds.append(srcfd)
        return childfd

    def reply(self, nid: int, val: int = 0, error: int = 0,
              continue_syscall: bool = False) -> bool:
        reply = self._replies.setdefault(nid, FakeReply())
        if nid in self._stale:
            reply.dropped_stale = True
            self._reply_events[nid].set()
            return False
        reply.val, reply.error, reply.continued = val, error, continue_syscall
        self._reply_events[nid].set()
        return True

    def close(self) -> None:
        pass


class FakeLaunchRecorder:
    """Records the child-side confinement steps instead of performing them."""

    def __init__(self, landlock_abi: int = 7, fail_at: str | None = None):
        self.steps: list[str] = []
        self.landlock_abi = landlock_abi
        self.fail_at = fail_at
        self.rulesets: list[tuple] = []
        self.filters: list[frozenset] = []

    def record(self, step: str, detail=None) -> None:
        if self.fail_at == step:
            raise OSError(f"injected failure at {step}")
        self.steps.append(step)
        if step == "landlock" and detail is not None:
            self.rulesets.append(detail)
        if step == "seccomp" and detail is not None:
            self.filters.append(detail)
