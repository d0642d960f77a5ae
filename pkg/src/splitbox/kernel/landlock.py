"""Landlock ruleset construction: the kernel-enforced static layer.

Filesystem read/write scope, TCP connect/bind port scope, and abstract-socket
plus signal IPC scoping. The ABI floor is 6 (Linux 6.12+); callers refuse to
launch below it rather than installing a weaker ruleset.
"""

from __future__ import annotations

import ctypes
import os
import struct

from . import abi

_libc = ctypes.CDLL(None, use_errno=True)

LANDLOCK_CREATE_RULESET_VERSION = 1 << 0

ACCESS_FS_EXECUTE = 1 << 0
ACCESS_FS_WRITE_FILE = 1 << 1
ACCESS_FS_READ_FILE = 1 << 2
ACCESS_FS_READ_DIR = 1 << 3
ACCESS_FS_REMOVE_DIR = 1 << 4
ACCESS_FS_REMOVE_FILE = 1 << 5
ACCESS_FS_MAKE_CHAR = 1 << 6
ACCESS_FS_MAKE_DIR = 1 << 7
ACCESS_FS_MAKE_REG = 1 << 8
ACCESS_FS_MAKE_SOCK = 1 << 9
ACCESS_FS_MAKE_FIFO = 1 << 10
ACCESS_FS_MAKE_BLOCK = 1 << 11
ACCESS_FS_MAKE_SYM = 1 << 12
ACCESS_FS_REFER = 1 << 13
ACCESS_FS_TRUNCATE = 1 << 14
ACCESS_FS_IOCTL_DEV = 1 << 15

ACCESS_NET_BIND_TCP = 1 << 0
ACCESS_NET_CONNECT_TCP = 1 << 1

SCOPE_ABSTRACT_UNIX_SOCKET = 1 << 0
SCOPE_SIGNAL = 1 << 1

RULE_PATH_BENEATH = 1
RULE_NET_PORT = 2

READ_ACCESS = ACCESS_FS_READ_FILE | ACCESS_FS_READ_DIR | ACCESS_FS_EXECUTE
WRITE_ACCESS = (
    ACCESS_FS_WRITE_FILE | ACCESS_FS_REMOVE_DIR | ACCESS_FS_REMOVE_FILE
    | ACCESS_FS_MAKE_CHAR | ACCESS_FS_MAKE_DIR | ACCESS_FS_MAKE_REG
    | ACCESS_FS_MAKE_SOCK | ACCESS_FS_MAKE_FIFO | ACCESS_FS_MAKE_BLOCK
    | ACCESS_FS_MAKE_SYM | ACCESS_FS_REFER | ACCESS_FS_TRUNCATE
)
HANDLED_FS = READ_ACCESS | WRITE_ACCESS
HANDLED_NET = ACCESS_NET_BIND_TCP | ACCESS_NET_CONNECT_TCP
HANDLED_SCOPE = SCOPE_ABSTRACT_UNIX_SOCKET | SCOPE_SIGNAL


def probe_abi() -> int:
    """Running kernel's Landlock ABI; 0 when unsupported or disabled."""
    r = _libc.syscall(abi.SYS["landlock_create_ruleset"], None, 0,
                      LANDLOCK_CREATE_RULESET_VERSION)
    return r if r > 0 else 0


def apply_ruleset(read_paths: list[str], write_paths: list[str],
                  tcp_ports: frozenset[int], scope_ipc: bool = True) -> None:
    """Create and enforce a ruleset on the calling thread (irreversible).

    Write grants include read; everything outside the granted prefixes is
    denied by the handled-access mask. Raises OSError when the kernel refuses.
    """
    attr = struct.pack("QQQ", HANDLED_FS, HANDLED_NET,
                       HANDLED_SCOPE if scope_ipc else 0)
    attr_buf = ctypes.create_string_buffer(attr, len(attr))
    fd = _libc.syscall(abi.SYS["landlock_create_ruleset"],
                       ctypes.byref(attr_buf), len(attr), 0)
    if fd < 0:
        raise OSError(ctypes.get_errno(), "landlock_create_ruleset failed")
    try:
        for path, access in [(p, READ_ACCESS) for p in read_paths] + \
                            [(p, READ_ACCESS | WRITE_ACCESS) for p in write_paths]:
            pfd = os.open(path, os.O_PATH | os.O_CLOEXEC)
            try:
                rule = struct.pack("QiI", access, pfd, 0)
                rule_buf = ctypes.create_string_buffer(rule, len(rule))
                r = _libc.syscall(abi.SYS["landlock_add_rule"], fd,
                                  RULE_PATH_BENEATH, ctypes.byref(rule_buf), 0)
                if r != 0:
                    raise OSError(ctypes.get_errno(),
                                  f"landlock_add_rule failed for {path}")
            finally:
                os.close(pfd)
        for port in sorted(tcp_ports):
            rule = struct.pack("QQ", ACCESS_NET_CONNECT_TCP | ACCESS_NET_BIND_TCP,
                               port)
            rule_buf = ctypes.create_string_buffer(rule, len(rule))
            r = _libc.syscall(abi.SYS["landlock_add_rule"], fd,
                              RULE_NET_PORT, ctypes.byref(rule_buf), 0)
            if r != 0:
                raise OSError(ctypes.get_errno(),
                              f"landlock_add_rule failed for port {port}")
        r = _libc.syscall(abi.SYS["landlock_restrict_self"], fd, 0)
        if r != 0:
            raise OSError(ctypes.get_errno(), "landlock_restrict_self failed")
    finally:
        os.close(fd)
