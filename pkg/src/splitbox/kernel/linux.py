"""Thin wrappers over the raw syscalls the launcher and supervisor need:
pidfd transfer, ptrace, close_range, prctl. Everything here is unprivileged.
"""

from __future__ import annotations

import ctypes
import errno
import os
import signal

from . import abi

_libc = ctypes.CDLL(None, use_errno=True)


def _check(r: int, what: str) -> int:
    if r < 0:
        raise OSError(ctypes.get_errno(), what)
    return r


def set_no_new_privs() -> None:
    _check(_libc.prctl(abi.PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0),
           "PR_SET_NO_NEW_PRIVS")


def set_parent_death_signal(sig: int = signal.SIGKILL) -> None:
    _check(_libc.prctl(abi.PR_SET_PDEATHSIG, sig, 0, 0, 0), "PR_SET_PDEATHSIG")


def pidfd_open(pid: int) -> int:
    return _check(_libc.syscall(abi.SYS["pidfd_open"], pid, 0), "pidfd_open")


def pidfd_getfd(pidfd: int, targetfd: int) -> int:
    return _check(_libc.syscall(abi.SYS["pidfd_getfd"], pidfd, targetfd, 0),
                  "pidfd_getfd")


def grab_fd(pid: int, targetfd: int) -> int:
    """Duplicate a descriptor out of another process (shares the open file
    description, so operations on the dup act on the child's socket)."""
    pidfd = pidfd_open(pid)
    try:
        return pidfd_getfd(pidfd, targetfd)
    finally:
        os.close(pidfd)


def pidfd_available() -> bool:
    try:
        fd = pidfd_open(os.getpid())
    except OSError:
        return False
    try:
        probe = os.open("/dev/null", os.O_RDONLY)
        try:
            got = pidfd_getfd(fd, probe)
            os.close(got)
            return True
        finally:
            os.close(probe)
    except OSError:
        return False
    finally:
        os.close(fd)


def close_range(first: int, last: int = 2**32 - 1) -> None:
    r = _libc.syscall(abi.SYS["close_range"], first, last, 0)
    if r != 0 and ctypes.get_errno() != errno.ENOSYS:
        raise OSError(ctypes.get_errno(), "close_range")
    if r != 0:
        for fd in range(first, min(last + 1, 4096)):
            try:
                os.close(fd)
            except OSError:
                pass


def ptrace(request: int, pid: int, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    r = _libc.ptrace(request, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    if r == -1 and ctypes.get_errno() != 0:
        raise OSError(ctypes.get_errno(), f"ptrace request {request} on {pid}")
    return r


def ptrace_geteventmsg(pid: int) -> int:
    msg = ctypes.c_ulong()
    ctypes.set_errno(0)
    r = _libc.ptrace(abi.PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
    if r == -1 and ctypes.get_errno() != 0:
        raise OSError(ctypes.get_errno(), "PTRACE_GETEVENTMSG")
    return msg.value


def ptrace_available() -> bool:
    """Probe PTRACE_SEIZE against a short-lived child. (Detaching would need
    a ptrace-stop first; killing the probe child is enough cleanup.)"""
    pid = os.fork()
    if pid == 0:
        import time
        time.sleep(5)
        os._exit(0)
    try:
        ptrace(abi.PTRACE_SEIZE, pid, 0, 0)
        return True
    except OSError:
        return False
    finally:
        os.kill(pid, signal.SIGKILL)
        os.waitpid(pid, 0)


def tgid_of(tid: int) -> int:
    """Thread-group (process) id of a task, from /proc."""
    try:
        with open(f"/proc/{tid}/status", "rb") as f:
            for line in f:
                if line.startswith(b"Tgid:"):
                    return int(line.split()[1])
    except OSError:
        pass
    return tid


def ppid_of(pid: int) -> int:
    try:
        with open(f"/proc/{pid}/status", "rb") as f:
            for line in f:
                if line.startswith(b"PPid:"):
                    return int(line.split()[1])
    except OSError:
        pass
    return 0


def fd_path(pid: int, fd: int) -> str | None:
    try:
        return os.readlink(f"/proc/{pid}/fd/{fd}")
    except OSError:
        return None


def cwd_of(pid: int) -> str | None:
    try:
        return os.readlink(f"/proc/{pid}/cwd")
    except OSError:
        return None


def tasks_of(pid: int) -> list[int]:
    try:
        return sorted(int(t) for t in os.listdir(f"/proc/{pid}/task"))
    except OSError:
        return []


def pgid_members(pgid: int) -> list[int]:
    """Pids whose process group matches; used by the cooperative process
    counter. Scans /proc, so call it only at gating points."""
    members = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/stat", "rb") as f:
                fields = f.read().rsplit(b")", 1)[1].split()
            if int(fields[2]) == pgid:  # field 5 overall: pgrp
                members.append(int(entry))
        except (OSError, IndexError, ValueError):
            continue
    return members


def start_brk_of(pid: int) -> int | None:
    try:
        with open(f"/proc/{pid}/stat", "rb") as f:
            fields = f.read().rsplit(b")", 1)[1].split()
        return int(fields[44])  # start_brk, field 47 overall
    except (OSError, IndexError, ValueError):
        return None
