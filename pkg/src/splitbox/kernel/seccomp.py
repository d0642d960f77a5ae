"""seccomp-bpf filter construction and the user-notification channel.

The filter has three tiers: an unconditional deny set (EPERM), a notify set
routed to the supervisor, and allow for the remainder. Non-x86_64 audit
arches (including x32) kill the process. The notification channel wraps the
RECV/SEND/ID_VALID/ADDFD ioctls and the bracketed child-memory reads the
TOCTOU discipline requires.
"""

from __future__ import annotations

import ctypes
import errno
import fcntl
import os
import struct
import threading
from dataclasses import dataclass, field

from . import abi

_libc = ctypes.CDLL(None, use_errno=True)

# Shipped deny set, version 1. Syscalls with no Landlock equivalent that the
# agent workload never needs: tracing peers, loading kernel code, mounting,
# namespace moves, clock/host administration, io_uring (bypasses the filter
# for fs/net ops), key management, raw port I/O.
DENY_SET_V1: tuple[str, ...] = (
    "ptrace", "process_vm_readv", "process_vm_writev",
    "init_module", "finit_module", "delete_module",
    "kexec_load", "kexec_file_load",
    "mount", "umount2", "pivot_root", "chroot", "mount_setattr",
    "open_tree", "move_mount", "fsopen", "fsconfig", "fsmount", "fspick",
    "setns", "unshare",
    "bpf", "perf_event_open",
    "add_key", "request_key", "keyctl",
    "userfaultfd", "memfd_secret",
    "io_uring_setup", "io_uring_enter", "io_uring_register",
    "open_by_handle_at",
    "fanotify_init", "fanotify_mark",
    "quotactl", "acct", "nfsservctl",
    "settimeofday", "clock_adjtime",
    "sethostname", "setdomainname",
    "iopl", "ioperm", "syslog", "personality",
    "pidfd_getfd",
)

_BPF_LD_W_ABS = 0x20
_BPF_JEQ_K = 0x15
_BPF_JGE_K = 0x35
_BPF_AND_K = 0x54
_BPF_RET_K = 0x06

_AF_INET, _AF_INET6, _SOCK_STREAM = 2, 10, 1


def _insn(code: int, jt: int, jf: int, k: int) -> bytes:
    return struct.pack("HBBI", code, jt, jf, k)


def build_filter(deny: tuple[str, ...] = DENY_SET_V1,
                 notify: frozenset[str] = frozenset(),
                 deny_errno: int = errno.EPERM,
                 socket_mode: str = "none") -> bytes:
    """Assemble the BPF program. Matched syscalls return inline, so no jump
    offset in the deny/notify chains ever exceeds one instruction.

    socket_mode closes the inet gap the static TCP layer leaves open:
    "tcp_only" restricts AF_INET/AF_INET6 sockets to SOCK_STREAM (direct-path
    plans, where nothing dynamic will ever see a UDP flow), "deny_inet"
    refuses inet sockets entirely (no network rules at all), "none" leaves
    socket() alone (the on-behalf handlers govern every destination).
    """
    ret_errno = abi.SECCOMP_RET_ERRNO | (deny_errno & 0xFFFF)
    prog = [
        _insn(_BPF_LD_W_ABS, 0, 0, 4),  # arch
        _insn(_BPF_JEQ_K, 1, 0, abi.AUDIT_ARCH_X86_64),
        _insn(_BPF_RET_K, 0, 0, abi.SECCOMP_RET_KILL_PROCESS),
        _insn(_BPF_LD_W_ABS, 0, 0, 0),  # nr
        _insn(_BPF_JGE_K, 0, 1, abi.X32_SYSCALL_BIT),
        _insn(_BPF_RET_K, 0, 0, abi.SECCOMP_RET_KILL_PROCESS),
    ]
    for name in deny:
        prog.append(_insn(_BPF_JEQ_K, 0, 1, abi.SYS[name]))
        prog.append(_insn(_BPF_RET_K, 0, 0, ret_errno))
    for name in sorted(notify):
        prog.append(_insn(_BPF_JEQ_K, 0, 1, abi.SYS[name]))
        prog.append(_insn(_BPF_RET_K, 0, 0, abi.SECCOMP_RET_USER_NOTIF))
    if socket_mode == "tcp_only":
        prog += [
            _insn(_BPF_JEQ_K, 0, 7, abi.SYS["socket"]),
            _insn(_BPF_LD_W_ABS, 0, 0, 16),          # domain
            _insn(_BPF_JEQ_K, 1, 0, _AF_INET),
            _insn(_BPF_JEQ_K, 0, 4, _AF_INET6),      # other family: allow
            _insn(_BPF_LD_W_ABS, 0, 0, 24),          # type
            _insn(_BPF_AND_K, 0, 0, 0xFF),
            _insn(_BPF_JEQ_K, 1, 0, _SOCK_STREAM),
            _insn(_BPF_RET_K, 0, 0, ret_errno),
        ]
    elif socket_mode == "deny_inet":
        prog += [
            _insn(_BPF_JEQ_K, 0, 4, abi.SYS["socket"]),
            _insn(_BPF_LD_W_ABS, 0, 0, 16),          # domain
            _insn(_BPF_JEQ_K, 1, 0, _AF_INET),
            _insn(_BPF_JEQ_K, 0, 1, _AF_INET6),      # other family: allow
            _insn(_BPF_RET_K, 0, 0, ret_errno),
        ]
    elif socket_mode != "none":
        raise ValueError(f"unknown socket_mode {socket_mode!r}")
    prog.append(_insn(_BPF_RET_K, 0, 0, abi.SECCOMP_RET_ALLOW))
    return b"".join(prog)


class _SockFprog(ctypes.Structure):
    _fields_ = [("len", ctypes.c_ushort), ("filter", ctypes.c_void_p)]


def install_filter(prog: bytes, new_listener: bool = True) -> int:
    """Install the filter on the calling thread; returns the listener fd
    (or -1 without a listener). Requires no_new_privs to already be set."""
    buf = ctypes.create_string_buffer(prog, len(prog))
    fprog = _SockFprog(len(prog) // 8, ctypes.cast(buf, ctypes.c_void_p))
    flags = abi.SECCOMP_FILTER_FLAG_NEW_LISTENER if new_listener else 0
    fd = _libc.syscall(abi.SYS["seccomp"], abi.SECCOMP_SET_MODE_FILTER,
                       flags, ctypes.byref(fprog))
    if fd < 0:
        raise OSError(ctypes.get_errno(), "seccomp filter install failed")
    return fd


def notify_action_available() -> bool:
    act = ctypes.c_uint32(abi.SECCOMP_RET_USER_NOTIF)
    ctypes.set_errno(0)
    r = _libc.syscall(abi.SYS["seccomp"], abi.SECCOMP_GET_ACTION_AVAIL, 0,
                      ctypes.byref(act))
    return r == 0


class StaleNotification(Exception):
    """The child task exited or was replaced while its syscall was held."""


class MemoryBracket:
    """Context manager for one validated read pass; see NotifyChannel.bracket."""

    def __init__(self, channel, notif):
        self._channel = channel
        self._notif = notif

    def __enter__(self) -> "MemoryBracket":
        if not self._channel.id_valid(self._notif.id):
            raise StaleNotification(self._notif.id)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self._channel._post_read_hook(self._notif)
        if exc_type is None and not self._channel.id_valid(self._notif.id):
            raise StaleNotification(self._notif.id)
        return False

    def read(self, address: int, length: int) -> bytes:
        try:
            return self._channel._raw_read(self._notif, address, length)
        except (OSError, ValueError) as exc:
            raise StaleNotification(self._notif.id) from exc

    def c_string(self, address: int, max_len: int = 4096) -> bytes:
        data = self.read(address, max_len)
        nul = data.find(b"\0")
        if nul < 0:
            raise ValueError("unterminated string in child memory")
        return data[:nul]

    def c_string_vector(self, address: int, max_items: int = 1024,
                        max_len: int = 4096) -> list[bytes]:
        """NULL-terminated pointer array -> list of strings (argv/envp)."""
        import struct as _struct
        out: list[bytes] = []
        for i in range(max_items):
            raw = self.read(address + 8 * i, 8)
            if len(raw) < 8:
                raise StaleNotification(self._notif.id)
            ptr = _struct.unpack("Q", raw)[0]
            if ptr == 0:
                return out
            out.append(self.c_string(ptr, max_len))
        raise ValueError("argv vector too long")


@dataclass
class Notification:
    """One intercepted syscall, plus the private copies read from the child.

    memory_passes counts bracketed child-memory read passes; the single-read
    discipline allows at most one per notification.
    """

    id: int
    pid: int
    syscall_nr: int
    syscall: str
    args: tuple[int, ...]
    memory_passes: int = 0
    continue_after_read_ok: bool = False
    _decoded: dict = field(default_factory=dict)


class NotifyChannel:
    """The kernel seccomp user-notification protocol on a listener fd."""

    def __init__(self, fd: int, child_pid: int):
        self.fd = fd
        self.child_pid = child_pid
        self._send_lock = threading.Lock()

    def close(self) -> None:
        try:
            os.close(self.fd)
        except OSError:
            pass

    def recv(self) -> Notification | None:
        """Block for the next notification; None when the child tree is gone."""
        buf = bytearray(abi.SECCOMP_NOTIF_SIZE)
        while True:
            try:
                fcntl.ioctl(self.fd, abi.SECCOMP_IOCTL_NOTIF_RECV, buf)
            except OSError as exc:
                if exc.errno == errno.EINTR:
                    continue
                if exc.errno in (errno.ENOENT, errno.EBADF, errno.EIO):
                    return None
                raise
            nid, pid, nr, _arch, args = abi.unpack_notif(bytes(buf))
            return Notification(
                id=nid, pid=pid, syscall_nr=nr,
                syscall=abi.SYSCALL_NAMES.get(nr, str(nr)), args=args)

    def id_valid(self, nid: int) -> bool:
        try:
            fcntl.ioctl(self.fd, abi.SECCOMP_IOCTL_NOTIF_ID_VALID,
                        struct.pack("Q", nid))
            return True
        except OSError:
            return False

    def bracket(self, notif: Notification) -> "MemoryBracket":
        """One validity-bracketed read pass over the child's memory.

        The cookie is checked on entry and on exit; every byte read inside
        the bracket is a private copy, and the whole pass is discarded
        (StaleNotification) if the task exited or was replaced meanwhile.
        The single-read discipline allows exactly one pass per notification.
        """
        if notif.memory_passes >= 1:
            raise AssertionError(
                f"second memory pass for held {notif.syscall}; the single-read "
                f"discipline forbids re-reading child memory")
        notif.memory_passes += 1
        return MemoryBracket(self, notif)

    def read_memory(self, notif: Notification,
                    reads: list[tuple[int, int]]) -> list[bytes]:
        with self.bracket(notif) as mem:
            return [mem.read(address, length) for address, length in reads]

    def read_c_string(self, notif: Notification, address: int,
                      max_len: int = 4096) -> bytes:
        with self.bracket(notif) as mem:
            return mem.c_string(address, max_len)

    def _raw_read(self, notif: Notification, address: int, length: int) -> bytes:
        with open(f"/proc/{notif.pid}/mem", "rb", buffering=0) as mem:
            mem.seek(address)
            return mem.read(length)

    def write_memory(self, notif: Notification, address: int, data: bytes) -> None:
        """Write a result buffer into the child (what the kernel would have
        done for an emulated syscall). Bracketed like reads; a write to a
        stale task is dropped."""
        if not self.id_valid(notif.id):
            raise StaleNotification(notif.id)
        try:
            with open(f"/proc/{notif.pid}/mem", "wb", buffering=0) as mem:
                mem.seek(address)
                mem.write(data)
        except (OSError, ValueError) as exc:
            raise StaleNotification(notif.id) from exc
        if not self.id_valid(notif.id):
            raise StaleNotification(notif.id)

    def add_fd(self, notif: Notification, srcfd: int, cloexec: bool = False) -> int:
        """Inject srcfd into the child; returns the child-side fd number."""
        req = bytearray(abi.pack_notif_addfd(
            notif.id, srcfd, flags=0, newfd=0,
            newfd_flags=os.O_CLOEXEC if cloexec else 0))
        try:
            # A mutable buffer makes fcntl.ioctl hand back the ioctl's int
            # return, which for ADDFD is the child-side descriptor number.
            return fcntl.ioctl(self.fd, abi.SECCOMP_IOCTL_NOTIF_ADDFD, req)
        except OSError as exc:
            if exc.errno == errno.ENOENT:
                raise StaleNotification(notif.id) from exc
            raise

    def _post_read_hook(self, notif: Notification) -> None:
        """Test seam; the fake channel uses it to simulate racers."""

    def reply(self, nid: int, val: int = 0, error: int = 0,
              continue_syscall: bool = False) -> bool:
        """Answer a held notification. Returns False if the cookie went stale
        (child died mid-handling); the reply is dropped silently then."""
        flags = abi.SECCOMP_USER_NOTIF_FLAG_CONTINUE if continue_syscall else 0
        resp = abi.pack_notif_resp(nid, val, error, flags)
        with self._send_lock:
            try:
                fcntl.ioctl(self.fd, abi.SECCOMP_IOCTL_NOTIF_SEND, resp)
                return True
            except OSError as exc:
                if exc.errno == errno.ENOENT:
                    return False
                raise
