"""Ptrace engine: creation tracking and the freeze protocol for exec holds.

One engine thread per sandbox owns every ptrace call for that tree (requests
must come from the attaching thread). The root task is seized with
TRACE{FORK,VFORK,CLONE,EXEC} options, so new tasks auto-attach and stop
before running user code; the engine registers them (including which
processes share an address space) and resumes them. A freeze stops, via
interrupt requests, every task that could alias a held child's memory;
thawing resumes exactly the tasks the scope stopped.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
from dataclasses import dataclass

from .kernel import abi, linux

log = logging.getLogger(__name__)

_EVENT_NAMES = {abi.PTRACE_EVENT_FORK: "fork", abi.PTRACE_EVENT_VFORK: "vfork",
                abi.PTRACE_EVENT_CLONE: "clone", abi.PTRACE_EVENT_EXEC: "exec"}


class FreezeUnavailable(Exception):
    """Tracing cannot be used (policy knob or kernel restriction); exec
    holds must fail closed."""


@dataclass
class TaskInfo:
    tid: int
    tgid: int
    shares_vm_with: int  # tgid of the vm group this task belongs to


@dataclass
class FreezeScope:
    """Tasks stopped for one argv inspection; release resumes exactly them."""

    engine: "TraceEngine"
    tids: frozenset[int]
    held_tid: int
    released: bool = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self.engine._thaw(self)


class TraceEngine:
    def __init__(self, root_pid: int):
        self.root_pid = root_pid
        self._requests: "queue.Queue[tuple]" = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="sbx-tracer")
        self.tasks: dict[int, TaskInfo] = {}
        self._frozen: set[int] = set()
        self._deferred_cont: set[int] = set()
        self._lock = threading.Lock()
        self._attached = threading.Event()
        self._attach_error: OSError | None = None
        self.exit_status: int | None = None
        self._exit_event = threading.Event()
        self._exec_events: dict[int, threading.Event] = {}
        self._stop = False
        self.creations = 0

    # -- lifecycle -----------------------------------------------------

    def start(self, timeout: float = 5.0) -> "TraceEngine":
        self._thread.start()
        if not self._attached.wait(timeout):
            raise FreezeUnavailable("tracer attach timed out")
        if self._attach_error is not None:
            raise FreezeUnavailable(f"ptrace seize failed: {self._attach_error}")
        return self

    def shutdown(self) -> None:
        self._stop = True

    def wait_exit(self, timeout: float | None = None) -> int | None:
        self._exit_event.wait(timeout)
        return self.exit_status

    # -- requests from other threads ------------------------------------

    def freeze_aliases(self, held_tid: int, timeout: float = 5.0) -> FreezeScope:
        """Stop sibling threads and vm-sharing peer processes of held_tid."""
        done: "queue.Queue" = queue.Queue()
        self._requests.put(("freeze", held_tid, done))
        try:
            result = done.get(timeout=timeout)
        except queue.Empty:
            raise FreezeUnavailable("freeze request timed out") from None
        if isinstance(result, Exception):
            raise FreezeUnavailable(str(result))
        return result

    def _thaw(self, scope: FreezeScope) -> None:
        done: "queue.Queue" = queue.Queue()
        self._requests.put(("thaw", scope.tids, done))
        try:
            done.get(timeout=5)
        except queue.Empty:
            pass

    def thaw_after_exec(self, scope: FreezeScope, timeout: float = 0.5) -> None:
        """Release a scope once the held task's exec completed (or after a
        bounded wait for the failure path): the kernel re-reads argv early in
        execve, and the frozen tasks stay frozen across that window."""
        event = self._exec_events.setdefault(scope.held_tid, threading.Event())

        def waiter():
            event.wait(timeout)
            scope.release()

        threading.Thread(target=waiter, daemon=True,
                         name="sbx-thaw-after-exec").start()

    # -- engine thread -----------------------------------------------------

    def _run(self) -> None:
        opts = (abi.PTRACE_O_TRACEFORK | abi.PTRACE_O_TRACEVFORK
                | abi.PTRACE_O_TRACECLONE | abi.PTRACE_O_TRACEEXEC)
        try:
            linux.ptrace(abi.PTRACE_SEIZE, self.root_pid, 0, opts)
            tgid = linux.tgid_of(self.root_pid)
            self.tasks[self.root_pid] = TaskInfo(self.root_pid, tgid, tgid)
        except OSError as exc:
            self._attach_error = exc
            self._attached.set()
            return
        self._attached.set()

        idle_sleep = 0.0005
        while not self._stop:
            busy = self._drain_requests()
            busy |= self._poll_tasks()
            if not busy:
                time.sleep(idle_sleep)
                idle_sleep = min(idle_sleep * 2, 0.005)
            else:
                idle_sleep = 0.0005
            if not self.tasks:
                break
        self._exit_event.set()

    def _drain_requests(self) -> bool:
        busy = False
        while True:
            try:
                req = self._requests.get_nowait()
            except queue.Empty:
                return busy
            busy = True
            if req[0] == "freeze":
                _, held_tid, done = req
                try:
                    done.put(self._do_freeze(held_tid))
                except Exception as exc:
                    done.put(exc)
            elif req[0] == "thaw":
                _, tids, done = req
                self._do_thaw(tids)
                done.put(True)

    def _poll_tasks(self) -> bool:
        busy = False
        for tid in list(self.tasks):
            try:
                wpid, status = os.waitpid(tid, os.WNOHANG | abi.WALL)
            except ChildProcessError:
                self._forget(tid)
                continue
            except OSError:
                continue
            if wpid == 0:
                continue
            busy = True
            self._handle_status(tid, status)
        return busy

    def _handle_status(self, tid: int, status: int) -> None:
        if os.WIFEXITED(status) or os.WIFSIGNALED(status):
            if tid == self.root_pid:
                self.exit_status = status
                self._exit_event.set()
            self._forget(tid)
            return
        if not os.WIFSTOPPED(status):
            return
        event = status >> 16
        sig = os.WSTOPSIG(status)
        if event in (abi.PTRACE_EVENT_FORK, abi.PTRACE_EVENT_VFORK,
                     abi.PTRACE_EVENT_CLONE):
            self._handle_creation(tid, event)
        elif event == abi.PTRACE_EVENT_EXEC:
            done = self._exec_events.get(tid)
            if done is not None:
                done.set()
            # Exec killed any sibling threads; prune stale entries.
            info = self.tasks.get(tid)
            if info is not None:
                for other, oinfo in list(self.tasks.items()):
                    if other != tid and oinfo.tgid == info.tgid:
                        self._forget(other)
            self._cont(tid)
        elif event == abi.PTRACE_EVENT_STOP:
            if tid in self._frozen:
                return  # stays stopped until thaw
            try:
                linux.ptrace(abi.PTRACE_LISTEN, tid, 0, 0)
            except OSError:
                self._cont(tid)
        else:
            # Plain signal-delivery stop: reinject.
            self._cont(tid, sig if sig != 0 else 0)

    def _handle_creation(self, creator_tid: int, event: int) -> None:
        try:
            new_tid = linux.ptrace_geteventmsg(creator_tid)
        except OSError:
            self._cont(creator_tid)
            return
        creator = self.tasks.get(creator_tid)
        new_tgid = linux.tgid_of(new_tid)
        shares_vm = creator.shares_vm_with if creator else new_tgid
        if event == abi.PTRACE_EVENT_FORK or event == abi.PTRACE_EVENT_VFORK:
            shares_vm = new_tgid
        elif new_tgid != (creator.tgid if creator else -1):
            # clone into a new thread group: a vm-sharing peer process only
            # when CLONE_VM was set; /proc can't tell after the fact, so the
            # conservative reading is to keep it in the creator's vm group.
            shares_vm = creator.shares_vm_with if creator else new_tgid
        self.tasks[new_tid] = TaskInfo(new_tid, new_tgid, shares_vm)
        self.creations += 1
        # The new task is ptrace-stopped before any user code; consume that
        # stop, then release it unless a freeze covering its vm group holds.
        deadline = time.time() + 2
        while time.time() < deadline:
            try:
                wpid, status = os.waitpid(new_tid, os.WNOHANG | abi.WALL)
            except (ChildProcessError, OSError):
                break
            if wpid == new_tid:
                break
            time.sleep(0.0002)
        with self._lock:
            frozen_groups = {self.tasks[t].shares_vm_with
                             for t in self._frozen if t in self.tasks}
        if shares_vm in frozen_groups:
            self._deferred_cont.add(new_tid)
        else:
            self._cont(new_tid)
        self._cont(creator_tid)

    def _do_freeze(self, held_tid: int) -> FreezeScope:
        held_info = self.tasks.get(held_tid)
        if held_info is None:
            tgid = linux.tgid_of(held_tid)
            held_info = TaskInfo(held_tid, tgid, tgid)
        group = held_info.shares_vm_with
        targets: set[int] = set()
        for tid in linux.tasks_of(held_info.tgid):
            if tid != held_tid:
                targets.add(tid)
        for tid, info in self.tasks.items():
            if tid != held_tid and info.shares_vm_with == group:
                targets.add(tid)
        stopped: set[int] = set()
        for tid in targets:
            try:
                linux.ptrace(abi.PTRACE_INTERRUPT, tid, 0, 0)
            except OSError:
                continue  # task already gone
            deadline = time.time() + 1
            while time.time() < deadline:
                try:
                    wpid, status = os.waitpid(tid, os.WNOHANG | abi.WALL)
                except (ChildProcessError, OSError):
                    break
                if wpid == tid:
                    if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                        self._forget(tid)
                        break
                    stopped.add(tid)
                    break
                time.sleep(0.0002)
        with self._lock:
            self._frozen.update(stopped)
        return FreezeScope(self, frozenset(stopped), held_tid)

    def _do_thaw(self, tids: frozenset[int]) -> None:
        with self._lock:
            self._frozen.difference_update(tids)
        for tid in tids:
            self._cont(tid)
        deferred = list(self._deferred_cont)
        self._deferred_cont.clear()
        for tid in deferred:
            self._cont(tid)

    def _cont(self, tid: int, sig: int = 0) -> None:
        try:
            linux.ptrace(abi.PTRACE_CONT, tid, 0, sig)
        except OSError:
            pass

    def _forget(self, tid: int) -> None:
        self.tasks.pop(tid, None)
        with self._lock:
            self._frozen.discard(tid)
        self._deferred_cont.discard(tid)
