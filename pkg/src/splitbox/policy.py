"""Policy surface and its compilation into an enforcement plan.

A SandboxSpec names what a stage may touch; validate() normalizes it,
pin_resolution() fixes hostnames to concrete addresses, and compile_plan()
assigns every rule to the earliest enforcement point that can decide it:
kernel-static filesystem/port/IPC rules, the unconditional syscall deny set,
or a supervisor handler for anything that depends on syscall-time state.
"""

from __future__ import annotations

import ipaddress
import posixpath
import socket
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence


class PolicyError(ValueError):
    """A spec failed validation or a compile precondition."""


class Access(Enum):
    READ = "read"
    WRITE = "write"
    DENY = "deny"


class EffectAction(Enum):
    COMMIT = "commit"
    ABORT = "abort"
    KEEP = "keep"


class Protocol(Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"


@dataclass(frozen=True)
class PathRule:
    path: str
    access: Access

    def __post_init__(self) -> None:
        if not self.path.startswith("/"):
            raise PolicyError(f"path rule must be absolute: {self.path!r}")


@dataclass(frozen=True)
class EndpointRule:
    """protocol x destination; port_only grants a TCP port to any host."""

    protocol: Protocol
    destination: str | None = None
    port: int | None = None
    port_only: bool = False

    def __post_init__(self) -> None:
        if self.port is not None and not 0 <= self.port <= 65535:
            raise PolicyError(f"port out of range: {self.port}")
        if self.port_only:
            if self.protocol is not Protocol.TCP:
                raise PolicyError("port-only rules are TCP only")
            if self.destination is not None:
                raise PolicyError("port-only rules carry no destination")
            if self.port is None:
                raise PolicyError("port-only rule needs a port")
        elif self.protocol is Protocol.ICMP:
            if self.port is not None:
                raise PolicyError("icmp rules carry no port")
            if self.destination is None:
                raise PolicyError("icmp rule needs a destination")
        else:
            if self.destination is None or self.port is None:
                raise PolicyError(
                    f"{self.protocol.value} rule needs destination and port")
        if self.destination is not None and "*" in self.destination:
            raise PolicyError(
                f"wildcard hostnames are not supported: {self.destination!r}")


@dataclass(frozen=True)
class HttpRule:
    """method may be '*'; path_pattern is a prefix, with '*' matching any tail."""

    method: str
    host: str
    path_pattern: str
    port: int = 80

    def __post_init__(self) -> None:
        if "*" in self.host:
            raise PolicyError(f"wildcard hostnames are not supported: {self.host!r}")
        if not self.path_pattern.startswith("/"):
            raise PolicyError("path pattern must start with /")

    def implied_endpoint(self) -> EndpointRule:
        return EndpointRule(Protocol.TCP, self.host, self.port)

    def matches(self, method: str, host: str, path: str) -> bool:
        if self.method != "*" and self.method.upper() != method.upper():
            return False
        if self.host.lower() != host.lower():
            return False
        pat = self.path_pattern
        if pat.endswith("*"):
            return path.startswith(pat[:-1])
        return path == pat or path.startswith(pat.rstrip("/") + "/")


@dataclass(frozen=True)
class ResourceLimits:
    max_processes: int | None = None
    max_memory: int | None = None
    max_cpu: float | None = None
    max_fds: int | None = None

    def __post_init__(self) -> None:
        for name in ("max_processes", "max_memory", "max_fds"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise PolicyError(f"{name} must be positive, got {v}")
        if self.max_cpu is not None and not 0 < self.max_cpu <= 1:
            raise PolicyError(f"max_cpu must be in (0, 1], got {self.max_cpu}")

    def is_subset_of(self, other: "ResourceLimits") -> bool:
        """True if every limit here is at least as tight as in `other`."""
        for name in ("max_processes", "max_memory", "max_cpu", "max_fds"):
            mine, theirs = getattr(self, name), getattr(other, name)
            if theirs is None:
                continue
            if mine is None or mine > theirs:
                return False
        return True


@dataclass(frozen=True)
class RuntimeHookConfig:
    enabled: bool = False
    categories: frozenset[str] = frozenset({"exec"})
    hold_timeout: float | None = None
    freeze_disabled: bool = False  # test knob: simulate ptrace being unavailable


@dataclass(frozen=True)
class CowConfig:
    lower_root: str
    workspace_dir: str | None = None  # upper/manifest storage; temp dir if None
    on_exit: EffectAction = EffectAction.ABORT
    quota_bytes: int | None = None
    read_bypass: bool = False  # off for conformance: intercept every open


@dataclass(frozen=True)
class SandboxSpec:
    """User-facing policy for one command or pipeline stage."""

    fs: tuple[PathRule, ...] = ()
    cow: CowConfig | None = None
    endpoints: tuple[EndpointRule, ...] = ()
    http: tuple[HttpRule, ...] = ()
    resources: ResourceLimits = ResourceLimits()
    runtime: RuntimeHookConfig = RuntimeHookConfig()
    cwd: str | None = None
    https_ca_injection: bool = False
    enable_icmp_emulation: bool = False


@dataclass(frozen=True)
class NormalizedSpec:
    """validate() output: canonical paths, implied endpoints expanded."""

    fs: tuple[PathRule, ...]
    cow: CowConfig | None
    endpoints: tuple[EndpointRule, ...]
    http: tuple[HttpRule, ...]
    resources: ResourceLimits
    runtime: RuntimeHookConfig
    cwd: str | None
    enable_icmp_emulation: bool = False


@dataclass(frozen=True)
class PinnedAllowlist:
    """Hostnames resolved once at sandbox start; immutable afterwards.

    entries: (protocol, ip, port) for tcp/udp, (protocol, ip, None) for icmp.
    hostnames: ip -> a hostname it was resolved from (for the proxy's Host
    fallback; literals are omitted). by_hostname: hostname -> the full
    resolved address set, the authoritative map for host-scoped checks (one
    IP may serve several names).
    """

    entries: frozenset[tuple[Protocol, str, int | None]] = frozenset()
    hostnames: Mapping[str, str] = field(default_factory=dict)
    by_hostname: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def contains(self, protocol: Protocol, ip: str, port: int | None) -> bool:
        return (protocol, _canon_ip(ip), port) in self.entries

    def ips_of(self, hostname: str) -> frozenset[str]:
        name = hostname.lower()
        if name in self.by_hostname:
            return self.by_hostname[name]
        if _is_ip_literal(hostname):
            return frozenset({_canon_ip(hostname)})
        return frozenset()


Resolver = Callable[[str], Sequence[str]]


def system_resolver(host: str) -> list[str]:
    infos = socket.getaddrinfo(host, None, proto=socket.IPPROTO_TCP)
    seen: list[str] = []
    for info in infos:
        ip = info[4][0]
        if ip not in seen:
            seen.append(ip)
    return seen


def _canon_ip(text: str) -> str:
    return str(ipaddress.ip_address(text))


def _is_ip_literal(text: str) -> bool:
    try:
        ipaddress.ip_address(text)
        return True
    except ValueError:
        return False


def _canon_path(path: str) -> str:
    """Lexical canonicalization. Purely syntactic so validation stays
    kernel-independent; symlinks are the launcher's concern."""
    out = posixpath.normpath(path)
    if not out.startswith("/"):
        raise PolicyError(f"path rule must be absolute: {path!r}")
    return out


def validate(spec: SandboxSpec) -> NormalizedSpec:
    """Normalize a spec: canonical paths, deny-wins dedup, HTTP implications.

    Raises PolicyError for wildcard hostnames, relative paths, or limits out
    of range. Pure; safe on any platform.
    """
    rules: dict[tuple[str, Access], PathRule] = {}
    for rule in spec.fs:
        canon = PathRule(_canon_path(rule.path), rule.access)
        rules[(canon.path, canon.access)] = canon
    # Deny-wins: drop a read/write grant that is exactly shadowed by a deny
    # on the same path (deeper-prefix precedence is evaluated at check time).
    deny_paths = {p for (p, a) in rules if a is Access.DENY}
    fs = tuple(sorted(
        (r for (p, a), r in rules.items()
         if a is Access.DENY or p not in deny_paths),
        key=lambda r: (r.path, r.access.value),
    ))

    endpoints: dict[EndpointRule, None] = {}
    for ep in spec.endpoints:
        endpoints[_canon_endpoint(ep)] = None
    for hr in spec.http:
        endpoints[_canon_endpoint(hr.implied_endpoint())] = None

    cow = spec.cow
    if cow is not None:
        cow = replace(
            cow,
            lower_root=_canon_path(cow.lower_root),
            workspace_dir=(_canon_path(cow.workspace_dir)
                           if cow.workspace_dir else None),
        )

    if spec.https_ca_injection:
        raise PolicyError("HTTPS CA injection is not implemented; "
                          "HTTPS flows are governed by pinned endpoints only")

    return NormalizedSpec(
        fs=fs,
        cow=cow,
        endpoints=tuple(endpoints),
        http=tuple(dict.fromkeys(spec.http)),
        resources=spec.resources,
        runtime=spec.runtime,
        cwd=_canon_path(spec.cwd) if spec.cwd is not None else None,
        enable_icmp_emulation=spec.enable_icmp_emulation,
    )


def _canon_endpoint(ep: EndpointRule) -> EndpointRule:
    if ep.destination is not None and _is_ip_literal(ep.destination):
        return replace(ep, destination=_canon_ip(ep.destination))
    return ep


def pin_resolution(spec: NormalizedSpec,
                   resolver: Resolver = system_resolver) -> PinnedAllowlist:
    """Resolve every hostname once and pin the observed address set.

    IP literals pass through. An unresolvable hostname is a launch error:
    the sandbox fails closed rather than starting with a silently smaller
    allowlist.
    """
    entries: set[tuple[Protocol, str, int | None]] = set()
    hostnames: dict[str, str] = {}
    by_hostname: dict[str, set[str]] = {}
    for ep in spec.endpoints:
        if ep.port_only or ep.destination is None:
            continue
        literal = _is_ip_literal(ep.destination)
        if literal:
            ips = [_canon_ip(ep.destination)]
        else:
            try:
                ips = [_canon_ip(ip) for ip in resolver(ep.destination)]
            except OSError as exc:
                raise PolicyError(
                    f"cannot resolve {ep.destination!r}: {exc}") from exc
            if not ips:
                raise PolicyError(f"cannot resolve {ep.destination!r}: empty result")
            by_hostname.setdefault(ep.destination.lower(), set()).update(ips)
        for ip in ips:
            entries.add((ep.protocol, ip, ep.port))
            if not literal:
                hostnames.setdefault(ip, ep.destination)
    return PinnedAllowlist(
        frozenset(entries), hostnames,
        {name: frozenset(ips) for name, ips in by_hostname.items()})


# Enforcement layers, used to prove the partition property.
LAYER_STATIC_FS = "static_fs"
LAYER_STATIC_TCP = "static_tcp_ports"
LAYER_STATIC_IPC = "static_ipc"
LAYER_SYSCALL_FILTER = "syscall_filter"
LAYER_SUPERVISOR = "supervisor_handlers"


@dataclass(frozen=True)
class EnforcementPlan:
    """The compiled static/runtime split for one sandbox."""

    spec: NormalizedSpec
    pins: PinnedAllowlist
    static_fs: tuple[PathRule, ...]
    static_tcp_ports: frozenset[int]
    static_ipc_scoped: bool
    deny_syscalls: tuple[str, ...]
    notify_syscalls: frozenset[str]
    supervisor_handlers: Mapping[str, str]  # syscall name -> handler id
    direct_network: bool  # TCP policy decidable by ports alone, no HTTP rules
    rule_layers: Mapping[str, str]  # rule description -> claiming layer

    def required_landlock_abi(self) -> int:
        return 6


# Handler ids.
H_NET = "net_on_behalf"
H_COW = "cow_fs"
H_STATIC_FS = "supervised_static_fs"
H_PROC = "process_gate"
H_MEM = "memory_account"
H_EXEC = "exec_hold"

_NET_SYSCALLS = ("connect", "sendto", "sendmsg", "sendmmsg", "bind")
_CLONE_SYSCALLS = ("clone", "fork", "vfork", "clone3")
_MEM_SYSCALLS = ("mmap", "munmap", "mremap", "brk", "shmget")
COW_FS_SYSCALLS = (
    "open", "openat", "openat2", "creat",
    "getdents64",
    "unlink", "unlinkat", "rmdir",
    "mkdir", "mkdirat",
    "rename", "renameat", "renameat2",
    "truncate",
    "stat", "lstat", "newfstatat", "statx",
    "access", "faccessat", "faccessat2",
    "readlink", "readlinkat",
    "chdir", "fchdir", "getcwd",
    "symlink", "symlinkat", "link", "linkat", "mknod", "mknodat",
    "chmod", "fchmodat", "chown", "fchownat",
    "utime", "utimes", "utimensat", "futimesat",
)
STATIC_FS_SYSCALLS = (
    # What Landlock would gate: opens, namespace writes, truncate.
    "open", "openat", "openat2", "creat",
    "unlink", "unlinkat", "rmdir",
    "mkdir", "mkdirat",
    "rename", "renameat", "renameat2",
    "truncate",
    "symlink", "symlinkat", "link", "linkat", "mknod", "mknodat",
)
HOOK_HELD_SYSCALLS = ("execve", "execveat", "connect", "sendto", "sendmsg",
                      "sendmmsg", "bind", "openat")


def compile_plan(spec: NormalizedSpec, pins: PinnedAllowlist) -> EnforcementPlan:
    """Assign every rule to exactly one enforcement layer.

    TCP policy that depends only on ports, with no HTTP rules, stays static
    (direct path). Host-specific, HTTP, UDP, and ICMP rules go to the
    on-behalf path. A COW workspace routes the filesystem syscall classes to
    the supervisor; resource limits route their syscall classes likewise; the
    runtime hook routes all held syscalls.
    """
    from .kernel.seccomp import DENY_SET_V1  # local import: keep policy pure

    layers: dict[str, str] = {}
    notify: set[str] = set()
    handlers: dict[str, str] = {}

    static_fs: list[PathRule] = []
    for rule in spec.fs:
        static_fs.append(rule)
        layers[f"fs:{rule.access.value}:{rule.path}"] = LAYER_STATIC_FS

    port_only = {ep.port for ep in spec.endpoints if ep.port_only}
    hosted = [ep for ep in spec.endpoints if not ep.port_only]
    direct = not hosted and not spec.http and not spec.runtime.enabled

    for ep in spec.endpoints:
        if ep.protocol is Protocol.ICMP and not spec.enable_icmp_emulation:
            raise PolicyError(
                "icmp rules are feature-gated; set enable_icmp_emulation")
        desc = (f"net:{ep.protocol.value}:{ep.destination or '*'}:"
                f"{'port' if ep.port_only else ep.port}")
        if ep.port_only and direct:
            layers[desc] = LAYER_STATIC_TCP
        else:
            layers[desc] = LAYER_SUPERVISOR
    for hr in spec.http:
        layers[f"http:{hr.method}:{hr.host}:{hr.path_pattern}"] = LAYER_SUPERVISOR

    static_ports = frozenset(p for p in port_only if p is not None) \
        if direct else frozenset()

    # Direct path: with no host rules the static layer admits only the listed
    # ports, and an empty port set is deny-all, so nothing dynamic is needed.
    if not direct and (spec.endpoints or spec.http):
        for name in _NET_SYSCALLS:
            notify.add(name)
            handlers[name] = H_NET

    fs_dynamic = spec.cow is not None
    if fs_dynamic:
        for name in COW_FS_SYSCALLS:
            notify.add(name)
            handlers[name] = H_COW
        layers[f"cow:{spec.cow.lower_root}"] = LAYER_SUPERVISOR
        for name in _CLONE_SYSCALLS:  # per-process fd/cwd state inheritance
            notify.add(name)
            handlers.setdefault(name, H_PROC)

    if spec.resources.max_processes is not None:
        for name in _CLONE_SYSCALLS:
            notify.add(name)
            handlers[name] = H_PROC
        layers[f"res:max_processes={spec.resources.max_processes}"] = LAYER_SUPERVISOR
    if spec.resources.max_memory is not None:
        for name in _MEM_SYSCALLS:
            notify.add(name)
            handlers[name] = H_MEM
        layers[f"res:max_memory={spec.resources.max_memory}"] = LAYER_SUPERVISOR
    if spec.resources.max_cpu is not None:
        layers[f"res:max_cpu={spec.resources.max_cpu}"] = LAYER_SUPERVISOR
    if spec.resources.max_fds is not None:
        # RLIMIT_NOFILE is applied pre-exec; the kernel enforces it after.
        layers[f"res:max_fds={spec.resources.max_fds}"] = LAYER_SYSCALL_FILTER

    if spec.runtime.enabled:
        for name in HOOK_HELD_SYSCALLS:
            notify.add(name)
        handlers["execve"] = H_EXEC
        handlers["execveat"] = H_EXEC
        for name in _NET_SYSCALLS:
            handlers.setdefault(name, H_NET)
        handlers.setdefault("openat", H_COW if fs_dynamic else H_STATIC_FS)
        for name in _CLONE_SYSCALLS:  # creation tracking for the freeze index
            notify.add(name)
            handlers.setdefault(name, H_PROC)
        layers["runtime:hook"] = LAYER_SUPERVISOR

    for name in DENY_SET_V1:
        layers[f"deny:{name}"] = LAYER_SYSCALL_FILTER

    return EnforcementPlan(
        spec=spec,
        pins=pins,
        static_fs=tuple(static_fs),
        static_tcp_ports=static_ports,
        static_ipc_scoped=True,
        deny_syscalls=tuple(DENY_SET_V1),
        notify_syscalls=frozenset(notify),
        supervisor_handlers=handlers,
        direct_network=direct,
        rule_layers=layers,
    )


class PathPolicy:
    """Static path-scope decisions shared by the Landlock backend, the
    supervised fallback, and the fake channel tests.

    Deny wins on equal-or-deeper prefixes; the longest matching grant decides
    otherwise; no match means denied (default deny).
    """

    def __init__(self, rules: Iterable[PathRule]):
        self._reads: list[str] = []
        self._writes: list[str] = []
        self._denies: list[str] = []
        for rule in rules:
            if rule.access is Access.READ:
                self._reads.append(rule.path)
            elif rule.access is Access.WRITE:
                self._writes.append(rule.path)
            else:
                self._denies.append(rule.path)

    @staticmethod
    def _covers(prefix: str, path: str) -> bool:
        return path == prefix or path.startswith(prefix.rstrip("/") + "/")

    def _denied(self, path: str) -> bool:
        return any(self._covers(d, path) for d in self._denies)

    def allows_read(self, path: str) -> bool:
        if self._denied(path):
            return False
        return any(self._covers(g, path) for g in self._reads + self._writes)

    def allows_write(self, path: str) -> bool:
        if self._denied(path):
            return False
        return any(self._covers(g, path) for g in self._writes)

    def with_denied(self, path: str) -> "PathPolicy":
        clone = PathPolicy([])
        clone._reads = list(self._reads)
        clone._writes = list(self._writes)
        clone._denies = self._denies + [_canon_path(path)]
        return clone

    def readable_set_within(self, candidates: Iterable[str]) -> frozenset[str]:
        return frozenset(p for p in candidates if self.allows_read(p))
