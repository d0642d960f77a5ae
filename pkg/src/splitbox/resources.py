"""Cooperative resource limits without cgroups.

Fork-class syscalls are gated by a live process count (threads excluded);
address-space requests are accounted at notification time and overshoot
terminates the process group; CPU share is a SIGSTOP/SIGCONT duty cycle on
the group; descriptors are a plain RLIMIT_NOFILE applied pre-exec. All of it
is enforcement at syscall boundaries, not kernel allocation time - the
documented trade-off of going unprivileged.
"""

from __future__ import annotations

import errno
import logging
import os
import signal
import threading
from dataclasses import dataclass, field

from .kernel import abi, linux
from .kernel.seccomp import Notification, StaleNotification
from .policy import ResourceLimits
from .supervisor import SupervisorState, Verdict

log = logging.getLogger(__name__)

CLONE3_MODE_INSPECT = "inspect"
CLONE3_MODE_ENOSYS = "enosys"


@dataclass
class ResourceLedger:
    """Live counters for one sandbox; updates serialized by the lock."""

    limits: ResourceLimits
    pgid: int | None = None
    live_processes: int = 1
    mapped_bytes: int = 0
    peak_mapped: int = 0
    known_pids: set[int] = field(default_factory=set)
    brk_current: dict[int, int] = field(default_factory=dict)
    terminated: bool = False
    terminate_reason: str | None = None
    clone3_mode: str = CLONE3_MODE_INSPECT
    lock: threading.Lock = field(default_factory=threading.Lock)

    def attach(self, root_pid: int, pgid: int) -> None:
        self.pgid = pgid
        self.known_pids = {root_pid}
        self.live_processes = 1

    # -- process count -----------------------------------------------------

    def _recount(self) -> int:
        """Prune exited pids and pick up group members we did not create
        ourselves (gating points only; this reads /proc)."""
        if self.pgid is not None:
            self.known_pids.update(linux.pgid_members(self.pgid))
        alive = set()
        for pid in self.known_pids:
            try:
                os.kill(pid, 0)
                alive.add(pid)
            except OSError:
                continue
        self.known_pids = alive
        self.live_processes = max(len(alive), 0)
        return self.live_processes

    def gate_process_creation(self) -> bool:
        """True to allow; False when the cap is hit."""
        with self.lock:
            if self.limits.max_processes is None:
                self.live_processes += 1
                return True
            live = self._recount()
            if live + 1 > self.limits.max_processes:
                return False
            self.live_processes = live + 1
            return True

    def note_exit_recount(self) -> int:
        with self.lock:
            return self._recount()

    # -- memory -------------------------------------------------------------

    def charge(self, delta: int) -> bool:
        """Apply a request delta; False means the limit was crossed."""
        with self.lock:
            self.mapped_bytes = max(0, self.mapped_bytes + delta)
            self.peak_mapped = max(self.peak_mapped, self.mapped_bytes)
            if self.limits.max_memory is not None \
                    and self.mapped_bytes > self.limits.max_memory:
                return False
            return True

    def kill_group(self, reason: str) -> None:
        self.terminated = True
        self.terminate_reason = reason
        if self.pgid is None:
            return
        try:
            os.killpg(self.pgid, signal.SIGKILL)
        except OSError:
            pass


MAP_FIXED_BITS = 0  # requested length is counted regardless of placement


class ResourceHandlers:
    """clone-family gating and memory accounting handlers."""

    def __init__(self, state: SupervisorState):
        self.state = state

    def register_into(self, table) -> None:
        for name in ("clone", "fork", "vfork", "clone3"):
            table.register(name, self.handle_clone)
        for name in ("mmap", "munmap", "mremap", "brk", "shmget"):
            table.register(name, self.handle_memory)

    # -- clone family ---------------------------------------------------

    def _clone_flags(self, notif: Notification, state) -> int | None:
        """Flags for clone/clone3; None for plain fork/vfork."""
        if notif.syscall == "clone":
            return notif.args[0]
        if notif.syscall == "vfork":
            return abi.CLONE_VFORK
        if notif.syscall == "fork":
            return 0
        # clone3: flags live in child memory. Reading then continuing is the
        # sanctioned cooperative-accounting exemption (the count is not a
        # capability decision); ENOSYS mode sidesteps it entirely and libc
        # falls back to plain clone.
        ledger = self.state.ledger
        if ledger is not None and ledger.clone3_mode == CLONE3_MODE_ENOSYS:
            return None
        size = notif.args[1]
        if size < 8:
            raise OSError(errno.EINVAL, "short clone_args")
        with state.channel.bracket(notif) as mem:
            raw = mem.read(notif.args[0], 8)
        if len(raw) < 8:
            raise OSError(errno.EPERM, "unreadable clone_args")
        notif.continue_after_read_ok = True
        return abi.unpack_clone3_flags(raw)

    def handle_clone(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        ledger = self.state.ledger
        if notif.syscall == "clone3" and ledger is not None \
                and ledger.clone3_mode == CLONE3_MODE_ENOSYS:
            return Verdict.deny(errno.ENOSYS)
        try:
            flags = self._clone_flags(notif, state)
        except StaleNotification:
            raise
        except (OSError, ValueError):
            return Verdict.deny(errno.EPERM)

        if state.hook is not None:
            verdict = state.hook.on_clone(notif, flags or 0)
            if verdict is not None:
                return verdict

        if flags is not None and flags & abi.CLONE_THREAD:
            return Verdict.allow()  # threads are uncounted
        if ledger is None:
            return Verdict.allow()
        if ledger.gate_process_creation():
            return Verdict.allow()
        return Verdict.deny(errno.EAGAIN)

    # -- memory accounting ------------------------------------------------

    def handle_memory(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        ledger = self.state.ledger
        if ledger is None:
            return Verdict.allow()
        delta = 0
        if notif.syscall == "mmap":
            delta = notif.args[1]
        elif notif.syscall == "munmap":
            delta = -notif.args[1]
        elif notif.syscall == "mremap":
            delta = notif.args[2] - notif.args[1]
        elif notif.syscall == "shmget":
            delta = notif.args[1]
        elif notif.syscall == "brk":
            delta = self._brk_delta(notif)
        if delta == 0 or ledger.charge(delta):
            return Verdict.allow()
        # Overshoot: terminate the whole group before the mapping lands.
        ledger.kill_group(
            f"memory limit exceeded: {ledger.mapped_bytes} requested, "
            f"limit {ledger.limits.max_memory}")
        if self.state.audit is not None:
            self.state.audit.log("resource", what="max_memory",
                                 action="terminated",
                                 requested=ledger.mapped_bytes,
                                 limit=ledger.limits.max_memory)
        return Verdict.deny(errno.ENOMEM)

    def _brk_delta(self, notif: Notification) -> int:
        new_break = notif.args[0]
        ledger = self.state.ledger
        tgid = linux.tgid_of(notif.pid)
        with ledger.lock:
            current = ledger.brk_current.get(tgid)
        if current is None:
            current = linux.start_brk_of(tgid) or new_break
        if new_break == 0:  # query form
            return 0
        delta = new_break - current
        with ledger.lock:
            ledger.brk_current[tgid] = new_break
        return delta


class CpuThrottle:
    """Duty-cycle stop/continue on the child's process group."""

    def __init__(self, pgid: int, duty: float, period: float = 0.1):
        if not 0 < duty <= 1:
            raise ValueError(f"duty must be in (0, 1], got {duty}")
        self.pgid = pgid
        self.duty = duty
        self.period = period
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.stops_sent = 0

    def start(self) -> "CpuThrottle":
        if self.duty >= 1.0:
            return self  # full share: no throttle task at all
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="sbx-cpu-throttle")
        self._thread.start()
        return self

    def _run(self) -> None:
        run_slice = self.period * self.duty
        stop_slice = self.period - run_slice
        try:
            while not self._stop.is_set():
                if self._stop.wait(run_slice):
                    break
                os.killpg(self.pgid, signal.SIGSTOP)
                self.stops_sent += 1
                interrupted = self._stop.wait(stop_slice)
                os.killpg(self.pgid, signal.SIGCONT)
                if interrupted:
                    break
        except ProcessLookupError:
            return  # group vanished: clean end
        except OSError:
            return
        finally:
            try:
                os.killpg(self.pgid, signal.SIGCONT)
            except OSError:
                pass

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)


def apply_fd_limit(limit: int | None) -> None:
    """Pre-exec RLIMIT_NOFILE; stdio is already open so a tiny cap still
    leaves a functional child."""
    if limit is None:
        return
    import resource
    resource.setrlimit(resource.RLIMIT_NOFILE, (limit, limit))
