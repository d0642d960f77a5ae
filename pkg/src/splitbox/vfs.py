"""Filesystem syscall handlers: COW routing and supervised static scope.

Paths arrive as pointer arguments, so every decision here acts on a
validated private copy and the operation is performed by the supervisor
(open + descriptor injection, on-behalf namespace edits, emulated results
written back into child memory). Under a COW workspace, paths inside the
lower tree route through the layer algebra; everything else is checked
against the static path policy and performed on the host. chdir/getcwd are
virtualized per process because upper-only directories exist nowhere the
kernel could chdir to.
"""

from __future__ import annotations

import errno
import logging
import os
import stat as stat_m
import struct
import threading

from .cow import CowError, LayerSet
from .kernel import abi, linux
from .kernel.seccomp import Notification
from .policy import PathPolicy
from .supervisor import SupervisorState, Verdict

log = logging.getLogger(__name__)

O_ACCMODE = 0o3
O_CREAT = 0o100
O_EXCL = 0o200
O_TRUNC = 0o1000
O_APPEND = 0o2000
O_DIRECTORY = 0o200000
O_NOFOLLOW = 0o400000
O_CLOEXEC = 0o2000000

_GETCWD_MAX = 4096

F_OK, X_OK, W_OK, R_OK = 0, 1, 2, 4


def time_ns_now() -> int:
    import time
    return time.time_ns()


class _DirCursor:
    """Merged-listing snapshot for one open directory handle. Taken at the
    first read and paged through on subsequent reads."""

    __slots__ = ("logical", "records", "index")

    def __init__(self, logical: str):
        self.logical = logical
        self.records: list[bytes] | None = None
        self.index = 0


class Located:
    """A resolved path argument: either inside the COW workspace (rel set)
    or a host path subject to static policy."""

    __slots__ = ("kind", "path", "rel")

    def __init__(self, kind: str, path: str, rel: str | None = None):
        self.kind = kind  # "cow" | "host"
        self.path = path  # logical absolute path
        self.rel = rel

    def __repr__(self):
        return f"Located({self.kind}, {self.path!r})"


class VfsHandlers:
    """All fs-class handlers for one sandbox."""

    def __init__(self, state: SupervisorState, layers: LayerSet | None,
                 initial_cwd: str, read_bypass: bool = False):
        self.state = state
        self.layers = layers
        self.initial_cwd = os.path.abspath(initial_cwd)
        self.read_bypass = read_bypass
        self._vcwd: dict[int, str] = {}
        self._cursors: dict[tuple[int, int], _DirCursor] = {}
        self._lock = threading.RLock()

    def register_into(self, table) -> None:
        t = table.register
        for name in ("open", "openat", "openat2", "creat"):
            t(name, self.handle_open)
        t("getdents64", self.handle_getdents64)
        for name in ("unlink", "unlinkat", "rmdir"):
            t(name, self.handle_unlink)
        for name in ("mkdir", "mkdirat"):
            t(name, self.handle_mkdir)
        for name in ("rename", "renameat", "renameat2"):
            t(name, self.handle_rename)
        t("truncate", self.handle_truncate)
        for name in ("stat", "lstat", "newfstatat"):
            t(name, self.handle_stat)
        t("statx", self.handle_statx)
        for name in ("access", "faccessat", "faccessat2"):
            t(name, self.handle_access)
        for name in ("readlink", "readlinkat"):
            t(name, self.handle_readlink)
        t("chdir", self.handle_chdir)
        t("fchdir", self.handle_fchdir)
        t("getcwd", self.handle_getcwd)
        for name in ("symlink", "symlinkat"):
            t(name, self.handle_symlink)
        for name in ("link", "linkat", "mknod", "mknodat"):
            t(name, self.handle_refused)
        for name in ("chmod", "fchmodat"):
            t(name, self.handle_chmod)
        for name in ("chown", "fchownat"):
            t(name, self.handle_chown)
        for name in ("utime", "utimes", "utimensat", "futimesat"):
            t(name, self.handle_utimens)

    # -- path resolution -------------------------------------------------

    def _policy(self) -> PathPolicy:
        return self.state.path_policy

    def vcwd_of(self, tgid: int) -> str:
        """Virtual cwd with lazy fork inheritance via the ppid chain."""
        with self._lock:
            cur = self._vcwd.get(tgid)
        if cur is not None:
            return cur
        seen = set()
        pid = tgid
        while pid > 1 and pid not in seen:
            seen.add(pid)
            pid = linux.ppid_of(pid)
            with self._lock:
                cur = self._vcwd.get(pid)
            if cur is not None:
                return cur
        return self.initial_cwd

    @staticmethod
    def _signed_fd(value: int) -> int:
        v = value & 0xFFFFFFFF
        return v - (1 << 32) if v >= (1 << 31) else v

    def _dirfd_logical(self, notif: Notification, dirfd: int) -> str | None:
        tgid = self.state.tgid_of(notif.pid)
        if self._signed_fd(dirfd) == abi.AT_FDCWD:
            if self.layers is not None:
                return self.vcwd_of(tgid)
            return linux.cwd_of(notif.pid) or self.initial_cwd
        real = linux.fd_path(notif.pid, dirfd)
        if real is None:
            return None
        return self._logical_of_real(real)

    def _logical_of_real(self, real: str) -> str:
        if self.layers is not None:
            rel = self.layers.rel_of(real)
            if rel is not None:
                base = self.layers.lower_root
                return f"{base}/{rel}" if rel else base
        return real

    def locate(self, notif: Notification, dirfd: int, path_bytes: bytes,
               ) -> Located:
        """Map a (dirfd, path) argument pair to a logical absolute path."""
        path = os.fsdecode(path_bytes)
        tgid = self.state.tgid_of(notif.pid)
        if path.startswith("/proc/self"):
            path = f"/proc/{tgid}" + path[len("/proc/self"):]
        elif path.startswith("/proc/thread-self"):
            path = f"/proc/{notif.pid}" + path[len("/proc/thread-self"):]
        if not path.startswith("/"):
            base = self._dirfd_logical(notif, dirfd)
            if base is None:
                raise CowError(errno.EBADF)
            path = os.path.join(base, path)
        path = os.path.normpath(path)
        if self.layers is not None:
            lower = self.layers.lower_root
            if path == lower or path.startswith(lower + "/"):
                rel = "" if path == lower else path[len(lower) + 1:]
                return Located("cow", path, rel)
        return Located("host", path)

    # -- policy checks -----------------------------------------------------

    def _can_read(self, loc: Located) -> bool:
        policy = self._policy()
        return policy is None or policy.allows_read(loc.path)

    def _can_write(self, loc: Located) -> bool:
        policy = self._policy()
        return policy is None or policy.allows_write(loc.path)

    # -- open ---------------------------------------------------------------

    def _open_args(self, notif: Notification, state) -> tuple[bytes, int, int, int]:
        """(path, flags, mode, dirfd) for the four open spellings."""
        channel = state.channel
        if notif.syscall == "open":
            with channel.bracket(notif) as mem:
                path = mem.c_string(notif.args[0])
            return path, notif.args[1], notif.args[2], abi.AT_FDCWD
        if notif.syscall == "creat":
            with channel.bracket(notif) as mem:
                path = mem.c_string(notif.args[0])
            return path, os.O_WRONLY | O_CREAT | O_TRUNC, notif.args[1], \
                abi.AT_FDCWD
        if notif.syscall == "openat":
            with channel.bracket(notif) as mem:
                path = mem.c_string(notif.args[1])
            return path, notif.args[2], notif.args[3], notif.args[0]
        # openat2: struct open_how { u64 flags, mode, resolve }
        with channel.bracket(notif) as mem:
            path = mem.c_string(notif.args[1])
            how = mem.read(notif.args[2], 24)
        if len(how) < 24:
            raise CowError(errno.EFAULT)
        flags, mode, _resolve = struct.unpack("QQQ", how)
        return path, flags, mode, notif.args[0]

    def handle_open(self, notif: Notification, state: SupervisorState,
                    ) -> Verdict:
        try:
            path, flags, mode, dirfd = self._open_args(notif, state)
            loc = self.locate(notif, dirfd, path)
        except CowError as exc:
            return Verdict.deny(exc.errno)
        wants_write = (flags & O_ACCMODE) != os.O_RDONLY or flags & (
            O_CREAT | O_TRUNC | O_APPEND)

        if self.state.hook is not None:
            hv = self.state.hook.deliver_file_event(notif, "openat")
            if hv is not None:
                return hv

        if loc.kind == "host":
            return self._open_host(notif, state, loc, flags, mode, wants_write)
        return self._open_cow(notif, state, loc, flags, mode, wants_write)

    def _open_host(self, notif, state, loc, flags, mode, wants_write) -> Verdict:
        if wants_write:
            if not self._can_write(loc):
                self._audit_fs("open", loc.path, "deny", notif.pid)
                return Verdict.deny(errno.EACCES)
        elif not self._can_read(loc):
            self._audit_fs("open", loc.path, "deny", notif.pid)
            return Verdict.deny(errno.EACCES)
        try:
            fd = os.open(loc.path, flags & ~O_CLOEXEC, mode & 0o7777)
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        self._audit_fs("open", loc.path, "allow", notif.pid)
        if stat_m.S_ISDIR(os.fstat(fd).st_mode):
            return self._inject_tracked_dir(notif, state, fd, flags, loc.path)
        return Verdict.emulate_fd(fd, cloexec=bool(flags & O_CLOEXEC))

    def _open_cow(self, notif, state, loc, flags, mode, wants_write) -> Verdict:
        layers = self.layers
        try:
            if wants_write:
                if not self._can_write(loc):
                    return Verdict.deny(errno.EACCES)
                upper = layers.prepare_open_write(
                    loc.rel, create=bool(flags & O_CREAT),
                    excl=bool(flags & O_EXCL), truncate=bool(flags & O_TRUNC))
                try:
                    fd = os.open(upper, flags & ~(O_CLOEXEC | O_EXCL),
                                 mode & 0o7777)
                except OSError as exc:
                    return Verdict.emulate(0, err=exc.errno or errno.EIO)
                return Verdict.emulate_fd(fd, cloexec=bool(flags & O_CLOEXEC))
            if not self._can_read(loc):
                return Verdict.deny(errno.EACCES)
            entry = layers.resolve_read(
                loc.rel, follow_final=not flags & O_NOFOLLOW)
            if entry is None:
                return Verdict.emulate(0, err=errno.ENOENT)
            try:
                fd = os.open(entry.real_path, flags & ~O_CLOEXEC, mode & 0o7777)
            except OSError as exc:
                return Verdict.emulate(0, err=exc.errno or errno.EIO)
            if stat_m.S_ISDIR(os.fstat(fd).st_mode):
                return self._inject_tracked_dir(notif, state, fd, flags,
                                                loc.path)
            return Verdict.emulate_fd(fd, cloexec=bool(flags & O_CLOEXEC))
        except CowError as exc:
            return Verdict.deny(exc.errno)

    def _inject_tracked_dir(self, notif, state, fd, flags, logical) -> Verdict:
        """Directories need cursor state for merged getdents64."""
        try:
            childfd = state.channel.add_fd(notif, fd,
                                           cloexec=bool(flags & O_CLOEXEC))
        finally:
            os.close(fd)
        tgid = self.state.tgid_of(notif.pid)
        with self._lock:
            self._cursors[(tgid, childfd)] = _DirCursor(logical)
        return Verdict.emulate(childfd)

    # -- getdents64 -------------------------------------------------------

    def _snapshot_dir(self, logical: str) -> list[bytes] | None:
        loc = Located("host", logical)
        if self.layers is not None:
            lower = self.layers.lower_root
            if logical == lower or logical.startswith(lower + "/"):
                rel = "" if logical == lower else logical[len(lower) + 1:]
                try:
                    metas = self.layers.merged_entries_with_meta(rel)
                except CowError:
                    return None
                records = [abi.pack_dirent64(1, 1, 4, b"."),
                           abi.pack_dirent64(1, 2, 4, b"..")]
                for off, (name, ino, st_mode) in enumerate(metas, start=3):
                    records.append(abi.pack_dirent64(
                        ino, off, abi.dirent_type(st_mode), os.fsencode(name)))
                return records
        try:
            names = sorted(os.listdir(logical))
        except OSError:
            return None
        records = [abi.pack_dirent64(1, 1, 4, b"."),
                   abi.pack_dirent64(1, 2, 4, b"..")]
        for off, name in enumerate(names, start=3):
            try:
                st = os.lstat(os.path.join(logical, name))
                ino, dtype = st.st_ino, abi.dirent_type(st.st_mode)
            except OSError:
                ino, dtype = 1, 0
            records.append(abi.pack_dirent64(ino, off, dtype,
                                             os.fsencode(name)))
        return records

    def handle_getdents64(self, notif: Notification, state: SupervisorState,
                          ) -> Verdict:
        fd, dirp, count = notif.args[0], notif.args[1], notif.args[2]
        tgid = self.state.tgid_of(notif.pid)
        with self._lock:
            cursor = self._cursors.get((tgid, fd))
        if cursor is None:
            real = linux.fd_path(notif.pid, fd)
            if real is None:
                return Verdict.deny(errno.EBADF)
            logical = self._logical_of_real(real)
            if not os.path.isdir(real):
                return Verdict.deny(errno.ENOTDIR)
            cursor = _DirCursor(logical)
            with self._lock:
                self._cursors[(tgid, fd)] = cursor
        if cursor.records is None:
            records = self._snapshot_dir(cursor.logical)
            if records is None:
                return Verdict.deny(errno.ENOENT)
            cursor.records = records
        out = b""
        taken = 0
        while cursor.index + taken < len(cursor.records):
            rec = cursor.records[cursor.index + taken]
            if len(out) + len(rec) > count:
                break
            out += rec
            taken += 1
        if not out and cursor.index + taken < len(cursor.records):
            return Verdict.deny(errno.EINVAL)  # buffer too small for one entry
        cursor.index += taken
        if out:
            state.channel.write_memory(notif, dirp, out)
        return Verdict.emulate(len(out))

    # -- namespace edits ---------------------------------------------------

    def _path_arg(self, notif, state, ptr_index: int, dirfd_index: int | None,
                  ) -> Located:
        with state.channel.bracket(notif) as mem:
            path = mem.c_string(notif.args[ptr_index])
        dirfd = notif.args[dirfd_index] if dirfd_index is not None \
            else abi.AT_FDCWD
        return self.locate(notif, dirfd, path)

    def handle_unlink(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        if notif.syscall == "unlinkat":
            loc = self._path_arg(notif, state, 1, 0)
            rmdir = bool(notif.args[2] & abi.AT_REMOVEDIR)
        else:
            loc = self._path_arg(notif, state, 0, None)
            rmdir = notif.syscall == "rmdir"
        if not self._can_write(loc):
            self._audit_fs("unlink", loc.path, "deny", notif.pid)
            return Verdict.deny(errno.EACCES)
        try:
            if loc.kind == "cow":
                if rmdir:
                    self.layers.rmdir(loc.rel)
                else:
                    self.layers.unlink(loc.rel)
            else:
                (os.rmdir if rmdir else os.unlink)(loc.path)
        except CowError as exc:
            return Verdict.emulate(0, err=exc.errno)
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        self._audit_fs("unlink", loc.path, "allow", notif.pid)
        return Verdict.emulate(0)

    def handle_mkdir(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        if notif.syscall == "mkdirat":
            loc = self._path_arg(notif, state, 1, 0)
            mode = notif.args[2]
        else:
            loc = self._path_arg(notif, state, 0, None)
            mode = notif.args[1]
        if not self._can_write(loc):
            return Verdict.deny(errno.EACCES)
        try:
            if loc.kind == "cow":
                self.layers.mkdir(loc.rel, mode & 0o7777)
            else:
                os.mkdir(loc.path, mode & 0o7777)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    def handle_rename(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        if notif.syscall == "rename":
            with state.channel.bracket(notif) as mem:
                old = mem.c_string(notif.args[0])
                new = mem.c_string(notif.args[1])
            old_dirfd = new_dirfd = abi.AT_FDCWD
            flags = 0
        else:
            with state.channel.bracket(notif) as mem:
                old = mem.c_string(notif.args[1])
                new = mem.c_string(notif.args[3])
            old_dirfd, new_dirfd = notif.args[0], notif.args[2]
            flags = notif.args[4] if notif.syscall == "renameat2" else 0
        if flags:
            # RENAME_NOREPLACE/EXCHANGE/WHITEOUT are not emulated across
            # layers; refuse rather than half-apply.
            return Verdict.deny(errno.EINVAL)
        try:
            src = self.locate(notif, old_dirfd, old)
            dst = self.locate(notif, new_dirfd, new)
        except CowError as exc:
            return Verdict.deny(exc.errno)
        if not self._can_write(src) or not self._can_write(dst):
            return Verdict.deny(errno.EACCES)
        try:
            if src.kind == "cow" and dst.kind == "cow":
                self.layers.rename(src.rel, dst.rel)
            elif src.kind == "host" and dst.kind == "host":
                os.replace(src.path, dst.path)
            else:
                return Verdict.emulate(0, err=errno.EXDEV)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    def handle_truncate(self, notif: Notification, state: SupervisorState,
                        ) -> Verdict:
        loc = self._path_arg(notif, state, 0, None)
        length = notif.args[1]
        if not self._can_write(loc):
            return Verdict.deny(errno.EACCES)
        try:
            if loc.kind == "cow":
                upper = self.layers.prepare_open_write(
                    loc.rel, create=False, excl=False, truncate=False)
                os.truncate(upper, length)
            else:
                os.truncate(loc.path, length)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    # -- metadata reads ------------------------------------------------------

    def _resolve_backing(self, loc: Located, follow: bool) -> str | None:
        if loc.kind == "cow":
            entry = self.layers.resolve_read(loc.rel, follow_final=follow)
            return entry.real_path if entry else None
        return loc.path

    def handle_stat(self, notif: Notification, state: SupervisorState,
                    ) -> Verdict:
        if notif.syscall == "newfstatat":
            flags = notif.args[3]
            if notif.args[1] == 0:
                return Verdict.deny(errno.EFAULT)
            with state.channel.bracket(notif) as mem:
                path = mem.c_string(notif.args[1])
            if path == b"":
                if not flags & abi.AT_EMPTY_PATH:
                    return Verdict.emulate(0, err=errno.ENOENT)
                # fstat of a descriptor the child already holds: the open
                # granted the capability, no path check applies. Statting the
                # /proc link works for pipes and sockets too.
                try:
                    st = os.stat(
                        f"/proc/{notif.pid}/fd/{self._signed_fd(notif.args[0])}")
                except OSError as exc:
                    return Verdict.emulate(0, err=exc.errno or errno.EBADF)
                state.channel.write_memory(notif, notif.args[2],
                                           abi.pack_stat(st))
                return Verdict.emulate(0)
            else:
                loc = self.locate(notif, notif.args[0], path)
                follow = not flags & abi.AT_SYMLINK_NOFOLLOW
            buf_ptr = notif.args[2]
        else:
            loc = self._path_arg(notif, state, 0, None)
            follow = notif.syscall == "stat"
            buf_ptr = notif.args[1]
        if not self._can_read(loc):
            return Verdict.deny(errno.EACCES)
        try:
            backing = self._resolve_backing(loc, follow)
        except CowError as exc:
            return Verdict.emulate(0, err=exc.errno)
        if backing is None:
            return Verdict.emulate(0, err=errno.ENOENT)
        try:
            st = os.stat(backing) if follow else os.lstat(backing)
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        state.channel.write_memory(notif, buf_ptr, abi.pack_stat(st))
        return Verdict.emulate(0)

    def handle_statx(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        # libc falls back to newfstatat on ENOSYS, which is emulated.
        return Verdict.deny(errno.ENOSYS)

    def handle_access(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        if notif.syscall == "access":
            loc = self._path_arg(notif, state, 0, None)
            mode = notif.args[1]
        else:
            loc = self._path_arg(notif, state, 1, 0)
            mode = notif.args[2]
        try:
            backing = self._resolve_backing(loc, follow=True)
        except CowError as exc:
            return Verdict.emulate(0, err=exc.errno)
        if backing is None:
            return Verdict.emulate(0, err=errno.ENOENT)
        if mode & R_OK and not self._can_read(loc):
            return Verdict.emulate(0, err=errno.EACCES)
        if mode & W_OK:
            if not self._can_write(loc):
                return Verdict.emulate(0, err=errno.EACCES)
            if loc.kind == "host" and not os.access(backing, os.W_OK):
                return Verdict.emulate(0, err=errno.EACCES)
        if mode & X_OK and not os.access(backing, os.X_OK):
            return Verdict.emulate(0, err=errno.EACCES)
        if mode & R_OK and not os.access(backing, os.R_OK):
            return Verdict.emulate(0, err=errno.EACCES)
        return Verdict.emulate(0)

    def handle_readlink(self, notif: Notification, state: SupervisorState,
                        ) -> Verdict:
        if notif.syscall == "readlinkat":
            loc = self._path_arg(notif, state, 1, 0)
            buf_ptr, bufsiz = notif.args[2], notif.args[3]
        else:
            loc = self._path_arg(notif, state, 0, None)
            buf_ptr, bufsiz = notif.args[1], notif.args[2]
        if not self._can_read(loc):
            return Verdict.deny(errno.EACCES)
        try:
            backing = self._resolve_backing(loc, follow=False)
        except CowError as exc:
            return Verdict.emulate(0, err=exc.errno)
        if backing is None:
            return Verdict.emulate(0, err=errno.ENOENT)
        try:
            target = os.fsencode(os.readlink(backing))
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EINVAL)
        out = target[:bufsiz]
        state.channel.write_memory(notif, buf_ptr, out)
        return Verdict.emulate(len(out))

    # -- cwd virtualization ---------------------------------------------

    def handle_chdir(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        loc = self._path_arg(notif, state, 0, None)
        try:
            backing = self._resolve_backing(loc, follow=True)
        except CowError as exc:
            return Verdict.emulate(0, err=exc.errno)
        if backing is None:
            return Verdict.emulate(0, err=errno.ENOENT)
        if not os.path.isdir(backing):
            return Verdict.emulate(0, err=errno.ENOTDIR)
        if not self._can_read(loc):
            return Verdict.deny(errno.EACCES)
        tgid = self.state.tgid_of(notif.pid)
        with self._lock:
            self._vcwd[tgid] = loc.path
        return Verdict.emulate(0)

    def handle_fchdir(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        real = linux.fd_path(notif.pid, notif.args[0])
        if real is None:
            return Verdict.deny(errno.EBADF)
        if not os.path.isdir(real):
            return Verdict.emulate(0, err=errno.ENOTDIR)
        tgid = self.state.tgid_of(notif.pid)
        with self._lock:
            self._vcwd[tgid] = self._logical_of_real(real)
        return Verdict.emulate(0)

    def handle_getcwd(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        buf_ptr, size = notif.args[0], notif.args[1]
        tgid = self.state.tgid_of(notif.pid)
        cwd = os.fsencode(self.vcwd_of(tgid)) + b"\0"
        if len(cwd) > min(size, _GETCWD_MAX):
            return Verdict.emulate(0, err=errno.ERANGE)
        state.channel.write_memory(notif, buf_ptr, cwd)
        return Verdict.emulate(len(cwd))

    # -- the rest ----------------------------------------------------------

    def handle_symlink(self, notif: Notification, state: SupervisorState,
                       ) -> Verdict:
        if notif.syscall == "symlink":
            with state.channel.bracket(notif) as mem:
                target = mem.c_string(notif.args[0])
                linkpath = mem.c_string(notif.args[1])
            dirfd = abi.AT_FDCWD
        else:
            with state.channel.bracket(notif) as mem:
                target = mem.c_string(notif.args[0])
                linkpath = mem.c_string(notif.args[2])
            dirfd = notif.args[1]
        try:
            loc = self.locate(notif, dirfd, linkpath)
        except CowError as exc:
            return Verdict.deny(exc.errno)
        if not self._can_write(loc):
            return Verdict.deny(errno.EACCES)
        try:
            if loc.kind == "cow":
                self.layers.symlink(os.fsdecode(target), loc.rel)
            else:
                os.symlink(os.fsdecode(target), loc.path)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    def handle_refused(self, notif: Notification, state: SupervisorState,
                       ) -> Verdict:
        # Hard links across layers and device nodes are out of scope; the
        # errno is the conventional "operation not permitted".
        return Verdict.deny(errno.EPERM)

    def handle_chmod(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        if notif.syscall == "fchmodat":
            loc = self._path_arg(notif, state, 1, 0)
            mode = notif.args[2]
        else:
            loc = self._path_arg(notif, state, 0, None)
            mode = notif.args[1]
        if not self._can_write(loc):
            return Verdict.deny(errno.EACCES)
        try:
            if loc.kind == "cow":
                self.layers.apply_metadata(loc.rel, mode=mode & 0o7777)
            else:
                os.chmod(loc.path, mode & 0o7777)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    def handle_chown(self, notif: Notification, state: SupervisorState,
                     ) -> Verdict:
        # Ownership changes need privilege the sandbox does not have;
        # same-owner no-ops succeed, anything else fails as the kernel would.
        return Verdict.emulate(0, err=errno.EPERM)

    _UTIME_NOW = (1 << 30) - 1
    _UTIME_OMIT = (1 << 30) - 2

    def _decode_times(self, times_raw: bytes) -> tuple[int, int] | None:
        """timespec[2] -> ns pair; None means "now". UTIME_OMIT pairs are
        approximated by leaving both untouched (handled by the caller)."""
        if len(times_raw) != 32:
            return None
        a_s, a_ns, m_s, m_ns = struct.unpack("qqqq", times_raw)
        if a_ns in (self._UTIME_NOW, self._UTIME_OMIT) \
                or m_ns in (self._UTIME_NOW, self._UTIME_OMIT):
            return None
        return (a_s * 10**9 + a_ns, m_s * 10**9 + m_ns)

    def handle_utimens(self, notif: Notification, state: SupervisorState,
                       ) -> Verdict:
        if notif.syscall != "utimensat":
            return Verdict.emulate(0, err=errno.ENOSYS)
        if notif.args[1] == 0:
            # NULL path: futimens form on a descriptor the child already
            # holds; the open granted the capability, no path check applies.
            with state.channel.bracket(notif) as mem:
                times_raw = mem.read(notif.args[2], 32) if notif.args[2] else b""
            proc_link = f"/proc/{notif.pid}/fd/{self._signed_fd(notif.args[0])}"
            try:
                times_ns = self._decode_times(times_raw)
                if times_ns is not None:
                    os.utime(proc_link, ns=times_ns)
                else:
                    os.utime(proc_link)
            except OSError as exc:
                return Verdict.emulate(0, err=exc.errno or errno.EBADF)
            return Verdict.emulate(0)
        with state.channel.bracket(notif) as mem:
            path = mem.c_string(notif.args[1])
            times_raw = mem.read(notif.args[2], 32) if notif.args[2] else b""
        try:
            loc = self.locate(notif, notif.args[0], path)
        except CowError as exc:
            return Verdict.deny(exc.errno)
        if not self._can_write(loc):
            return Verdict.deny(errno.EACCES)
        times_ns = self._decode_times(times_raw)
        try:
            if loc.kind == "cow":
                self.layers.apply_metadata(loc.rel, times_ns=times_ns
                                           or tuple([time_ns_now()] * 2))
            elif times_ns is not None:
                os.utime(loc.path, ns=times_ns)
            else:
                os.utime(loc.path)
        except (CowError, OSError) as exc:
            return Verdict.emulate(0, err=exc.errno or errno.EIO)
        return Verdict.emulate(0)

    def _audit_fs(self, op: str, path: str, decision: str, pid: int) -> None:
        if self.state.audit is not None and decision == "deny":
            self.state.audit.log("fs", op=op, path=path, decision=decision,
                                 pid=pid)
