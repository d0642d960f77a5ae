"""x86_64 Linux ABI constants and on-wire struct codecs.

Syscall numbers, seccomp/Landlock constants, and pack/unpack helpers for the
kernel structures the supervisor reads from or writes into child memory
(sockaddr, linux_dirent64, struct stat, clone_args). Only x86_64 is supported;
the seccomp filter kills the process on any other audit arch.
"""

from __future__ import annotations

import os
import socket
import stat as stat_m
import struct

AUDIT_ARCH_X86_64 = 0xC000003E
X32_SYSCALL_BIT = 0x40000000

# Syscall numbers (x86_64).
SYS = {
    "read": 0,
    "write": 1,
    "open": 2,
    "close": 3,
    "stat": 4,
    "fstat": 5,
    "lstat": 6,
    "lseek": 8,
    "mmap": 9,
    "mprotect": 10,
    "munmap": 11,
    "brk": 12,
    "access": 21,
    "mremap": 25,
    "shmget": 29,
    "socket": 41,
    "connect": 42,
    "sendto": 44,
    "sendmsg": 46,
    "bind": 49,
    "clone": 56,
    "fork": 57,
    "vfork": 58,
    "execve": 59,
    "truncate": 76,
    "ftruncate": 77,
    "getcwd": 79,
    "chdir": 80,
    "fchdir": 81,
    "rename": 82,
    "mkdir": 83,
    "rmdir": 84,
    "creat": 85,
    "link": 86,
    "unlink": 87,
    "symlink": 88,
    "readlink": 89,
    "chmod": 90,
    "chown": 92,
    "ptrace": 101,
    "syslog": 103,
    "utime": 132,
    "mknod": 133,
    "personality": 135,
    "pivot_root": 155,
    "chroot": 161,
    "acct": 163,
    "settimeofday": 164,
    "mount": 165,
    "umount2": 166,
    "swapon": 167,
    "swapoff": 168,
    "reboot": 169,
    "sethostname": 170,
    "setdomainname": 171,
    "iopl": 172,
    "ioperm": 173,
    "init_module": 175,
    "delete_module": 176,
    "quotactl": 179,
    "nfsservctl": 180,
    "getdents64": 217,
    "utimes": 235,
    "kexec_load": 246,
    "add_key": 248,
    "request_key": 249,
    "keyctl": 250,
    "openat": 257,
    "mkdirat": 258,
    "mknodat": 259,
    "fchownat": 260,
    "futimesat": 261,
    "newfstatat": 262,
    "unlinkat": 263,
    "renameat": 264,
    "linkat": 265,
    "symlinkat": 266,
    "readlinkat": 267,
    "fchmodat": 268,
    "faccessat": 269,
    "unshare": 272,
    "utimensat": 280,
    "perf_event_open": 298,
    "fanotify_init": 300,
    "fanotify_mark": 301,
    "open_by_handle_at": 304,
    "clock_adjtime": 305,
    "sendmmsg": 307,
    "setns": 308,
    "process_vm_readv": 310,
    "process_vm_writev": 311,
    "finit_module": 313,
    "renameat2": 316,
    "seccomp": 317,
    "kexec_file_load": 320,
    "bpf": 321,
    "execveat": 322,
    "userfaultfd": 323,
    "statx": 332,
    "io_uring_setup": 425,
    "io_uring_enter": 426,
    "io_uring_register": 427,
    "open_tree": 428,
    "move_mount": 429,
    "fsopen": 430,
    "fsconfig": 431,
    "fsmount": 432,
    "fspick": 433,
    "pidfd_open": 434,
    "clone3": 435,
    "close_range": 436,
    "openat2": 437,
    "pidfd_getfd": 438,
    "faccessat2": 439,
    "mount_setattr": 442,
    "landlock_create_ruleset": 444,
    "landlock_add_rule": 445,
    "landlock_restrict_self": 446,
    "memfd_secret": 447,
}

SYSCALL_NAMES = {nr: name for name, nr in SYS.items()}

# seccomp(2)
SECCOMP_SET_MODE_FILTER = 1
SECCOMP_GET_ACTION_AVAIL = 2
SECCOMP_FILTER_FLAG_NEW_LISTENER = 1 << 3
SECCOMP_RET_KILL_PROCESS = 0x80000000
SECCOMP_RET_ERRNO = 0x00050000
SECCOMP_RET_USER_NOTIF = 0x7FC00000
SECCOMP_RET_ALLOW = 0x7FFF0000

# seccomp notify ioctls ('!' == 0x21; sizes 80/24/8/24 bytes).
SECCOMP_IOCTL_NOTIF_RECV = 0xC0502100
SECCOMP_IOCTL_NOTIF_SEND = 0xC0182101
SECCOMP_IOCTL_NOTIF_ID_VALID = 0x40082102
SECCOMP_IOCTL_NOTIF_ADDFD = 0x40182103

SECCOMP_NOTIF_SIZE = 80
SECCOMP_USER_NOTIF_FLAG_CONTINUE = 1
SECCOMP_ADDFD_FLAG_SETFD = 1

# prctl
PR_SET_NO_NEW_PRIVS = 38
PR_SET_PDEATHSIG = 1

# clone flags
CLONE_VM = 0x00000100
CLONE_THREAD = 0x00010000
CLONE_VFORK = 0x00004000

# open flags beyond the os module
O_PATH = 0o10000000
O_TMPFILE = 0o20200000

# AT_* flags
AT_FDCWD = -100
AT_REMOVEDIR = 0x200
AT_SYMLINK_NOFOLLOW = 0x100
AT_EMPTY_PATH = 0x1000

# ptrace
PTRACE_CONT = 7
PTRACE_DETACH = 17
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207
PTRACE_LISTEN = 0x4208
PTRACE_O_TRACEFORK = 0x2
PTRACE_O_TRACEVFORK = 0x4
PTRACE_O_TRACECLONE = 0x8
PTRACE_O_TRACEEXEC = 0x10
PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_EXEC = 4
PTRACE_EVENT_STOP = 128

WALL = 0x40000000


def unpack_notif(buf: bytes) -> tuple[int, int, int, int, tuple[int, ...]]:
    """struct seccomp_notif -> (id, pid, nr, arch, args[6])."""
    nid, pid, _flags = struct.unpack_from("QII", buf, 0)
    nr, arch = struct.unpack_from("iI", buf, 16)
    args = struct.unpack_from("6Q", buf, 32)
    return nid, pid, nr, arch, args


def pack_notif_resp(nid: int, val: int, error: int, flags: int) -> bytes:
    return struct.pack("QqiI", nid, val, error, flags)


def pack_notif_addfd(nid: int, srcfd: int, flags: int = 0, newfd: int = 0,
                     newfd_flags: int = 0) -> bytes:
    return struct.pack("QIIII", nid, flags, srcfd, newfd, newfd_flags)


def parse_sockaddr(raw: bytes) -> tuple[int, str | bytes | None, int | None]:
    """Decode a sockaddr blob -> (family, address, port).

    IPv4/IPv6 return (family, ip-string, port); AF_UNIX returns
    (family, path-bytes, None). Unknown families return (family, None, None).
    """
    if len(raw) < 2:
        return -1, None, None
    family = struct.unpack_from("H", raw, 0)[0]
    if family == socket.AF_INET and len(raw) >= 8:
        port = struct.unpack_from("!H", raw, 2)[0]
        return family, socket.inet_ntop(socket.AF_INET, raw[4:8]), port
    if family == socket.AF_INET6 and len(raw) >= 24:
        port = struct.unpack_from("!H", raw, 2)[0]
        return family, socket.inet_ntop(socket.AF_INET6, raw[8:24]), port
    if family == socket.AF_UNIX:
        path = raw[2:110]
        if path.startswith(b"\0"):
            return family, path.rstrip(b"\0") or b"\0", None
        return family, path.split(b"\0", 1)[0], None
    return family, None, None


def pack_sockaddr(ip: str, port: int) -> bytes:
    """Encode an IPv4/IPv6 destination as a sockaddr blob."""
    if ":" in ip:
        return (struct.pack("H", socket.AF_INET6) + struct.pack("!H", port)
                + b"\0\0\0\0" + socket.inet_pton(socket.AF_INET6, ip)
                + b"\0\0\0\0")
    return (struct.pack("H", socket.AF_INET) + struct.pack("!H", port)
            + socket.inet_pton(socket.AF_INET, ip) + b"\0" * 8)


_DT_FROM_MODE = {
    stat_m.S_IFREG: 8, stat_m.S_IFDIR: 4, stat_m.S_IFLNK: 10,
    stat_m.S_IFCHR: 2, stat_m.S_IFBLK: 6, stat_m.S_IFIFO: 1,
    stat_m.S_IFSOCK: 12,
}


def dirent_type(mode: int) -> int:
    return _DT_FROM_MODE.get(stat_m.S_IFMT(mode), 0)


def pack_dirent64(ino: int, off: int, dtype: int, name: bytes) -> bytes:
    """Encode one linux_dirent64 record (8-byte aligned)."""
    base = 8 + 8 + 2 + 1
    reclen = (base + len(name) + 1 + 7) & ~7
    pad = reclen - base - len(name)
    return struct.pack("QqHB", ino, off, reclen, dtype) + name + b"\0" * pad


def pack_stat(st: os.stat_result) -> bytes:
    """Encode struct stat (x86_64, 144 bytes) from an os.stat_result."""
    return struct.pack(
        "QQQIII4xQqqqqqqqqq24x",
        st.st_dev, st.st_ino, st.st_nlink, st.st_mode, st.st_uid, st.st_gid,
        st.st_rdev, st.st_size, st.st_blksize, st.st_blocks,
        st.st_atime_ns // 10**9, st.st_atime_ns % 10**9,
        st.st_mtime_ns // 10**9, st.st_mtime_ns % 10**9,
        st.st_ctime_ns // 10**9, st.st_ctime_ns % 10**9,
    )


def unpack_clone3_flags(raw: bytes) -> int:
    """First u64 of struct clone_args."""
    if len(raw) < 8:
        raise ValueError("short clone_args read")
    return struct.unpack_from("Q", raw, 0)[0]
