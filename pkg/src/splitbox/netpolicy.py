"""Endpoint allowlist enforcement on the on-behalf path.

The supervisor decodes destinations from validated copies of child sockaddrs,
checks them against the pinned allowlist, and either performs the operation
on the child's duplicated socket or denies it. Flows covered by an HTTP rule
are redirected to the local proxy; HTTPS-port flows without CA opt-in are
never parsed, only endpoint-checked. Destinations read from child memory are
never handed back to the kernel: on-behalf operations act on the private
copy via the pidfd-duplicated socket.
"""

from __future__ import annotations

import errno
import logging
import os
import socket
import struct
from dataclasses import dataclass, replace as dc_replace

from .kernel import abi
from .kernel.seccomp import Notification
from .policy import EndpointRule, PinnedAllowlist, PolicyError, Protocol
from .supervisor import SupervisorState, Verdict, grab_child_fd

log = logging.getLogger(__name__)

FLOW_DIRECT = "direct"
FLOW_HTTP = "http_proxied"
FLOW_RAW = "on_behalf_raw"
FLOW_DENIED = "denied"

_MAX_ONBEHALF_PAYLOAD = 1 << 20
_MSGHDR_SIZE = 56


def check_endpoint(dest: tuple[Protocol, str, int | None],
                   pins: PinnedAllowlist) -> bool:
    """Exact protocol+IP+port membership; pure."""
    protocol, ip, port = dest
    return pins.contains(protocol, ip, port)


@dataclass(frozen=True)
class NetState:
    """Live network tables; tightening swaps the whole snapshot."""

    pins: PinnedAllowlist
    port_only_tcp: frozenset[int]
    http_targets: frozenset[tuple[str, int]]  # (ip, port) flows to the proxy
    proxy_v4: tuple[str, int] | None = None
    proxy_v6: tuple[str, int] | None = None

    def tightened(self, keep: list[EndpointRule]) -> "NetState":
        """Restrict to a subset of the current allowlist. Anything in `keep`
        that is not already permitted is a widening attempt and rejected."""
        entries = set()
        ports = set()
        unmatched = []
        for ep in keep:
            if ep.port_only:
                if ep.port in self.port_only_tcp:
                    ports.add(ep.port)
                else:
                    unmatched.append(f"tcp:{ep.port}")
                continue
            keep_ips = self.pins.ips_of(ep.destination)
            hit = False
            for proto, ip, port in self.pins.entries:
                if proto is ep.protocol and port == ep.port and ip in keep_ips:
                    entries.add((proto, ip, port))
                    hit = True
            if not hit:
                unmatched.append(
                    f"{ep.protocol.value}:{ep.destination}:{ep.port}")
        if unmatched:
            raise PolicyError(
                f"tightening may only keep already-permitted endpoints; "
                f"not currently permitted: {unmatched}")
        return dc_replace(
            self,
            pins=PinnedAllowlist(frozenset(entries),
                                 dict(self.pins.hostnames),
                                 dict(self.pins.by_hostname)),
            port_only_tcp=frozenset(ports),
            http_targets=frozenset(
                t for t in self.http_targets
                if (Protocol.TCP, t[0], t[1]) in entries),
        )

    def permitted_size(self) -> int:
        return len(self.pins.entries) + len(self.port_only_tcp)


def net_state_for(plan, proxy_v4=None, proxy_v6=None) -> NetState:
    http_targets = set()
    for hr in plan.spec.http:
        for ip in plan.pins.ips_of(hr.host):
            http_targets.add((ip, hr.port))
    port_only = frozenset(
        ep.port for ep in plan.spec.endpoints if ep.port_only)
    return NetState(pins=plan.pins, port_only_tcp=port_only,
                    http_targets=frozenset(http_targets),
                    proxy_v4=proxy_v4, proxy_v6=proxy_v6)


def classify_flow(dest: tuple[Protocol, str, int | None], net: NetState,
                  direct_network: bool = False) -> str:
    """Which path handles a flow: kernel-static, proxy, raw on-behalf, deny."""
    protocol, ip, port = dest
    if protocol is Protocol.TCP and direct_network:
        return FLOW_DIRECT if port in net.port_only_tcp else FLOW_DENIED
    if protocol is Protocol.TCP and (ip, port) in net.http_targets:
        return FLOW_HTTP
    if check_endpoint(dest, net.pins):
        return FLOW_RAW
    if protocol is Protocol.TCP and port is not None \
            and port in net.port_only_tcp:
        return FLOW_RAW
    return FLOW_DENIED


def _sock_from_child(notif: Notification, fd_index: int) -> socket.socket:
    """The child's socket as a supervisor-owned dup (same open file
    description). Raises OSError(EBADF) when it vanished or is not a socket."""
    dup = grab_child_fd(notif, fd_index)
    try:
        return socket.socket(fileno=dup)
    except OSError as exc:
        os.close(dup)
        raise OSError(errno.EBADF, "child fd is not a socket") from exc


def _protocol_of(sock: socket.socket) -> Protocol | None:
    try:
        kind = sock.getsockopt(socket.SOL_SOCKET, socket.SO_TYPE)
    except OSError:
        return None
    if kind == socket.SOCK_STREAM:
        return Protocol.TCP
    if kind == socket.SOCK_DGRAM:
        return Protocol.UDP
    return None


class NetHandlers:
    """connect/sendto/sendmsg/sendmmsg/bind handlers."""

    def __init__(self, state: SupervisorState):
        self.state = state

    def register_into(self, table) -> None:
        table.register("connect", self.handle_connect)
        table.register("bind", self.handle_bind)
        table.register("sendto", self.handle_sendto)
        table.register("sendmsg", self.handle_sendmsg)
        table.register("sendmmsg", self.handle_sendmmsg)

    # -- events / audit ---------------------------------------------------

    def _hook_gate(self, notif, op, dest) -> Verdict | None:
        hook = self.state.hook
        if hook is None:
            return None
        return hook.deliver_net_event(notif, op, dest)

    def _audit(self, op: str, dest, decision: str, pid: int) -> None:
        if self.state.audit is None:
            return
        proto, ip, port = dest
        self.state.audit.log(
            "net", op=op, protocol=getattr(proto, "value", str(proto)),
            ip=str(ip), port=port, decision=decision, pid=pid)

    # -- connect ---------------------------------------------------------

    def handle_connect(self, notif: Notification, state: SupervisorState,
                       ) -> Verdict:
        channel = state.channel
        fd_index, addr_ptr, addr_len = notif.args[0], notif.args[1], notif.args[2]
        with channel.bracket(notif) as mem:
            raw = mem.read(addr_ptr, min(addr_len or 128, 128))
        family, ip, port = abi.parse_sockaddr(raw)

        if family == socket.AF_UNIX:
            return self._unix_connect(notif, fd_index, ip)
        if family not in (socket.AF_INET, socket.AF_INET6) or ip is None:
            return Verdict.deny(errno.EAFNOSUPPORT)

        try:
            sock = _sock_from_child(notif, fd_index)
        except OSError as exc:
            return Verdict.deny(exc.errno or errno.EBADF)
        try:
            proto = _protocol_of(sock)
            if proto is None:
                return Verdict.deny(errno.EPROTONOSUPPORT)
            dest = (proto, ip, port)
            # Policy snapshot precedes the callback: tightening applies to
            # subsequently handled notifications, not the one that tightened.
            net = state.net
            verdict = self._hook_gate(notif, "connect", dest)
            if verdict is not None:
                self._audit("connect", dest, "hook-deny", notif.pid)
                return verdict
            flow = classify_flow(dest, net)
            if flow == FLOW_DENIED:
                self._audit("connect", dest, "deny", notif.pid)
                return Verdict.deny(errno.ECONNREFUSED)
            if flow == FLOW_HTTP:
                proxy = (net.proxy_v6 if family == socket.AF_INET6
                         else net.proxy_v4)
                if proxy is None:
                    self._audit("connect", dest, "deny-no-proxy", notif.pid)
                    return Verdict.deny(errno.ECONNREFUSED)
                verdict = self._connect_dup(sock, proxy[0], proxy[1],
                                            origin=(ip, port), pid=notif.pid)
            else:
                verdict = self._connect_dup(sock, ip, port)
            self._audit("connect", dest, "allow", notif.pid)
            return verdict
        finally:
            sock.close()

    def _connect_dup(self, sock: socket.socket, ip: str, port: int,
                     origin: tuple[str, int] | None = None,
                     pid: int | None = None) -> Verdict:
        try:
            sock.connect((ip, port))
            result = Verdict.emulate(0)
        except BlockingIOError:
            result = Verdict.emulate(0, err=errno.EINPROGRESS)
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.ECONNREFUSED)
        if origin is not None:
            try:
                from .httpproxy import register_flow
                register_flow(sock.getsockname()[:2], origin,
                              self.state.net.pins.hostnames.get(origin[0]),
                              pid)
            except OSError:
                pass
        return result

    def _unix_connect(self, notif: Notification, fd_index: int,
                      path: str | bytes | None) -> Verdict:
        # Abstract sockets are IPC-scoped (denied); filesystem sockets follow
        # the write scope of path policy.
        if not isinstance(path, bytes) or path.startswith(b"\0"):
            return Verdict.deny(errno.EPERM)
        target = os.fsdecode(path)
        policy = self.state.path_policy
        if policy is None or not policy.allows_write(target):
            return Verdict.deny(errno.EACCES)
        try:
            sock = _sock_from_child(notif, fd_index)
        except OSError as exc:
            return Verdict.deny(exc.errno or errno.EBADF)
        try:
            sock.connect(target)
            return Verdict.emulate(0)
        except OSError as exc:
            return Verdict.emulate(0, err=exc.errno or errno.ECONNREFUSED)
        finally:
            sock.close()

    # -- bind ------------------------------------------------------------

    def handle_bind(self, notif: Notification, state: SupervisorState,
                    ) -> Verdict:
        channel = state.channel
        fd_index, addr_ptr, addr_len = notif.args[0], notif.args[1], notif.args[2]
        with channel.bracket(notif) as mem:
            raw = mem.read(addr_ptr, min(addr_len or 128, 128))
        family, ip, port = abi.parse_sockaddr(raw)
        if family == socket.AF_UNIX:
            return Verdict.deny(errno.EPERM)
        if family not in (socket.AF_INET, socket.AF_INET6) or ip is None:
            return Verdict.deny(errno.EAFNOSUPPORT)
        try:
            sock = _sock_from_child(notif, fd_index)
        except OSError as exc:
            return Verdict.deny(exc.errno or errno.EBADF)
        try:
            proto = _protocol_of(sock)
            if proto is None:
                return Verdict.deny(errno.EPROTONOSUPPORT)
            dest = (proto, ip, port)
            net = state.net
            verdict = self._hook_gate(notif, "bind", dest)
            if verdict is not None:
                return verdict
            allowed = (proto is Protocol.TCP
                       and port in net.port_only_tcp) \
                or check_endpoint(dest, net.pins)
            if not allowed:
                self._audit("bind", dest, "deny", notif.pid)
                return Verdict.deny(errno.EACCES)
            try:
                sock.bind((ip, port))
                self._audit("bind", dest, "allow", notif.pid)
                return Verdict.emulate(0)
            except OSError as exc:
                return Verdict.emulate(0, err=exc.errno or errno.EACCES)
        finally:
            sock.close()

    # -- datagram / vectored sends ----------------------------------------

    def handle_sendto(self, notif: Notification, state: SupervisorState,
                      ) -> Verdict:
        channel = state.channel
        fd_index, buf_ptr, length = notif.args[0], notif.args[1], notif.args[2]
        flags, addr_ptr, addr_len = notif.args[3], notif.args[4], notif.args[5]
        if addr_ptr == 0 or addr_len == 0:
            # Connected-socket send(): destination fixed at connect time, no
            # pointer argument is consulted, so the kernel may run it.
            verdict = self._hook_gate(notif, "sendto", None)
            return verdict if verdict is not None else Verdict.allow()
        if length > _MAX_ONBEHALF_PAYLOAD:
            return Verdict.deny(errno.EMSGSIZE)
        with channel.bracket(notif) as mem:
            raw_addr = mem.read(addr_ptr, min(addr_len, 128))
            payload = mem.read(buf_ptr, length)
        family, ip, port = abi.parse_sockaddr(raw_addr)
        if family == socket.AF_UNIX:
            return Verdict.deny(errno.EPERM)
        if family not in (socket.AF_INET, socket.AF_INET6) or ip is None:
            return Verdict.deny(errno.EAFNOSUPPORT)
        try:
            sock = _sock_from_child(notif, fd_index)
        except OSError as exc:
            return Verdict.deny(exc.errno or errno.EBADF)
        try:
            proto = _protocol_of(sock)
            if proto is None:
                return Verdict.deny(errno.EPROTONOSUPPORT)
            dest = (proto, ip, port)
            net = state.net
            verdict = self._hook_gate(notif, "sendto", dest)
            if verdict is not None:
                return verdict
            if classify_flow(dest, net) == FLOW_DENIED:
                self._audit("sendto", dest, "deny", notif.pid)
                return Verdict.deny(errno.EACCES)
            try:
                sent = sock.sendto(payload, flags & 0xFFFF, (ip, port))
                self._audit("sendto", dest, "allow", notif.pid)
                return Verdict.emulate(sent)
            except OSError as exc:
                return Verdict.emulate(0, err=exc.errno or errno.EIO)
        finally:
            sock.close()

    def handle_sendmsg(self, notif: Notification, state: SupervisorState,
                       ) -> Verdict:
        parsed = self._read_msghdr(notif, state.channel, notif.args[1])
        if isinstance(parsed, Verdict):
            return parsed
        return self._send_parsed(notif, notif.args[0], notif.args[2], parsed)

    def handle_sendmmsg(self, notif: Notification, state: SupervisorState,
                        ) -> Verdict:
        vlen = notif.args[2]
        if vlen == 0:
            return Verdict.emulate(0)
        if vlen > 64:
            return Verdict.deny(errno.EINVAL)
        channel = state.channel
        msgs = []
        with channel.bracket(notif) as mem:
            for i in range(vlen):
                base = notif.args[1] + i * (_MSGHDR_SIZE + 8)
                parsed = self._parse_one_msghdr(mem, base)
                if isinstance(parsed, Verdict):
                    return parsed
                msgs.append(parsed)
        sent_count = 0
        for parsed in msgs:
            verdict = self._send_parsed(notif, notif.args[0], notif.args[3],
                                        parsed)
            if verdict.kind != "emulate" or verdict.errno_value:
                return verdict if sent_count == 0 else Verdict.emulate(sent_count)
            sent_count += 1
        return Verdict.emulate(sent_count)

    def _read_msghdr(self, notif, channel, msg_ptr):
        with channel.bracket(notif) as mem:
            return self._parse_one_msghdr(mem, msg_ptr)

    def _parse_one_msghdr(self, mem, msg_ptr):
        """struct msghdr -> (dest sockaddr bytes | None, payload bytes).
        Control messages are refused: descriptor passing and ancillary data
        cannot be validated meaningfully on behalf of the child."""
        raw = mem.read(msg_ptr, _MSGHDR_SIZE)
        if len(raw) < _MSGHDR_SIZE:
            return Verdict.deny(errno.EFAULT)
        name_ptr = struct.unpack_from("Q", raw, 0)[0]
        name_len = struct.unpack_from("I", raw, 8)[0]
        iov_ptr = struct.unpack_from("Q", raw, 16)[0]
        iov_len = struct.unpack_from("Q", raw, 24)[0]
        ctrl_len = struct.unpack_from("Q", raw, 40)[0]
        if ctrl_len:
            return Verdict.deny(errno.EPERM)
        if iov_len > 64:
            return Verdict.deny(errno.EINVAL)
        total = 0
        chunks = []
        for i in range(iov_len):
            iov = mem.read(iov_ptr + 16 * i, 16)
            base, length = struct.unpack("QQ", iov)
            total += length
            if total > _MAX_ONBEHALF_PAYLOAD:
                return Verdict.deny(errno.EMSGSIZE)
            chunks.append(mem.read(base, length))
        addr = mem.read(name_ptr, min(name_len, 128)) if name_ptr and name_len \
            else None
        return addr, b"".join(chunks)

    def _send_parsed(self, notif, fd_index, flags, parsed) -> Verdict:
        addr, payload = parsed
        try:
            sock = _sock_from_child(notif, fd_index)
        except OSError as exc:
            return Verdict.deny(exc.errno or errno.EBADF)
        try:
            proto = _protocol_of(sock)
            if proto is None:
                return Verdict.deny(errno.EPROTONOSUPPORT)
            if addr is None:
                dest = None
                verdict = self._hook_gate(notif, "sendmsg", None)
                if verdict is not None:
                    return verdict
            else:
                family, ip, port = abi.parse_sockaddr(addr)
                if family == socket.AF_UNIX:
                    return Verdict.deny(errno.EPERM)
                if family not in (socket.AF_INET, socket.AF_INET6) or ip is None:
                    return Verdict.deny(errno.EAFNOSUPPORT)
                dest = (proto, ip, port)
                net = self.state.net
                verdict = self._hook_gate(notif, "sendmsg", dest)
                if verdict is not None:
                    return verdict
                if classify_flow(dest, net) == FLOW_DENIED:
                    self._audit("sendmsg", dest, "deny", notif.pid)
                    return Verdict.deny(errno.EACCES)
            try:
                if dest is None:
                    sent = sock.send(payload, flags & 0xFFFF)
                else:
                    sent = sock.sendto(payload, flags & 0xFFFF,
                                       (dest[1], dest[2]))
                if dest is not None:
                    self._audit("sendmsg", dest, "allow", notif.pid)
                return Verdict.emulate(sent)
            except OSError as exc:
                return Verdict.emulate(0, err=exc.errno or errno.EIO)
        finally:
            sock.close()
