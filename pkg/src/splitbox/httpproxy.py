"""Loopback forward proxy applying HTTP method/host/path rules.

Redirected connections arrive with their original destination recorded by
the connect handler (keyed by the client's ephemeral port). Each request
head is parsed, matched against the rules, and either forwarded verbatim to
the pinned upstream or answered 403. Bodies stream opaquely (content-length
or chunked); the proxy never inspects response payloads beyond framing.
"""

from __future__ import annotations

import logging
import socket
import threading
import time

from .policy import HttpRule

log = logging.getLogger(__name__)

_RECV = 65536
_HEAD_LIMIT = 64 * 1024

# connect-handler -> proxy rendezvous: client (ip, port) -> original
# destination. Global because the proxy and the supervisor live in the same
# process but are wired independently.
_flows: dict[tuple[str, int], tuple[str, int, str | None, int | None]] = {}
_flows_lock = threading.Lock()


def register_flow(client_addr: tuple[str, int], origin: tuple[str, int],
                  hostname: str | None, pid: int | None = None) -> None:
    with _flows_lock:
        _flows[(client_addr[0], client_addr[1])] = \
            (origin[0], origin[1], hostname, pid)


def _lookup_flow(peer: tuple[str, int], retries: int = 50,
                 ) -> tuple[str, int, str | None, int | None] | None:
    # The connect handler registers the flow right after connect() returns;
    # the accept side may win that race, so poll briefly.
    key = (peer[0], peer[1])
    for _ in range(retries):
        with _flows_lock:
            flow = _flows.pop(key, None)
        if flow is not None:
            return flow
        time.sleep(0.002)
    return None


class HttpDecision:
    __slots__ = ("matched", "action", "status")

    def __init__(self, matched: HttpRule | None, action: str, status: int = 0):
        self.matched = matched
        self.action = action  # "forward" | "reject"
        self.status = status


def decide(rules: list[HttpRule], method: str, host: str, path: str,
           ) -> HttpDecision:
    for rule in rules:
        if rule.matches(method, host, path):
            return HttpDecision(rule, "forward")
    return HttpDecision(None, "reject", 403)


def _parse_head(raw: bytes) -> tuple[str, str, str, dict[str, str], bytes]:
    """(method, target, version, headers, raw_head_bytes) or ValueError."""
    end = raw.find(b"\r\n\r\n")
    if end < 0:
        raise ValueError("incomplete head")
    head = raw[:end + 4]
    lines = head[:-4].split(b"\r\n")
    parts = lines[0].split(b" ")
    if len(parts) != 3:
        raise ValueError("malformed request line")
    method, target, version = (p.decode("latin-1") for p in parts)
    if not version.startswith("HTTP/1."):
        raise ValueError("unsupported HTTP version")
    headers: dict[str, str] = {}
    for line in lines[1:]:
        if b":" not in line:
            raise ValueError("malformed header")
        name, _, value = line.partition(b":")
        headers[name.strip().decode("latin-1").lower()] = \
            value.strip().decode("latin-1")
    return method, target, version, headers, head


def _split_target(target: str, headers: dict[str, str],
                  fallback_host: str | None) -> tuple[str, str]:
    """Request target + Host header -> (host, path). Absolute-form targets
    are honored; HTTP/1.0 requests without Host fall back to the pinned
    hostname of the original destination."""
    if target.startswith("http://") or target.startswith("https://"):
        rest = target.split("://", 1)[1]
        hostport, _, path = rest.partition("/")
        host = hostport.rsplit(":", 1)[0] if ":" in hostport else hostport
        return host, "/" + path
    host = headers.get("host")
    if host:
        host = host.rsplit(":", 1)[0] if ":" in host else host
        return host, target
    if fallback_host:
        return fallback_host, target
    return "", target


class _Connection(threading.Thread):
    def __init__(self, proxy: "HttpProxy", client: socket.socket,
                 peer: tuple[str, int]):
        super().__init__(daemon=True, name="sbx-proxy-conn")
        self.proxy = proxy
        self.client = client
        self.peer = peer

    def run(self) -> None:
        upstream: socket.socket | None = None
        try:
            flow = _lookup_flow(self.peer)
            origin_host = flow[2] if flow else None
            flow_pid = flow[3] if flow else None
            buf = b""
            while True:
                head, buf = self._read_head(buf)
                if head is None:
                    return
                method, target, version, headers, raw_head = head
                host, path = _split_target(target, headers, origin_host)
                if target != path:
                    # Absolute-form request: the origin expects origin-form.
                    first, rest = raw_head.split(b"\r\n", 1)
                    raw_head = b" ".join([method.encode(), path.encode(),
                                          version.encode()]) + b"\r\n" + rest
                decision = decide(self.proxy.rules, method, host, path)
                self.proxy.audit(method=method, host=host, path=path,
                                 decision=decision.action,
                                 pid=flow_pid)
                if decision.action != "forward":
                    self._reject(decision.status)
                    return
                if flow is None:
                    self._reject(502)
                    return
                if upstream is None:
                    upstream = self._dial((flow[0], flow[1]))
                    if upstream is None:
                        self._reject(502)
                        return
                upstream.sendall(raw_head)
                try:
                    buf = self._stream_body(raw_head, headers, buf, upstream)
                except (BrokenPipeError, ConnectionResetError):
                    # Upstream answered and closed before consuming the whole
                    # body; its response is still queued for relaying.
                    buf = b""
                if buf is None:
                    return
                if not self._relay_response(upstream):
                    return
                if headers.get("connection", "").lower() == "close":
                    return
        except Exception:
            log.debug("proxy connection error", exc_info=True)
        finally:
            try:
                self.client.close()
            except OSError:
                pass
            if upstream is not None:
                try:
                    upstream.close()
                except OSError:
                    pass

    def _read_head(self, buf: bytes):
        while b"\r\n\r\n" not in buf:
            if len(buf) > _HEAD_LIMIT:
                self._reject(400)
                return None, b""
            chunk = self.client.recv(_RECV)
            if not chunk:
                return None, b""
            buf += chunk
        try:
            method, target, version, headers, raw_head = _parse_head(buf)
        except ValueError:
            self._reject(400)
            return None, b""
        return (method, target, version, headers, raw_head), \
            buf[len(raw_head):]

    def _dial(self, origin: tuple[str, int]) -> socket.socket | None:
        try:
            return socket.create_connection(origin, timeout=30)
        except OSError:
            return None

    def _stream_body(self, raw_head: bytes, headers: dict[str, str],
                     buf: bytes, upstream: socket.socket) -> bytes | None:
        """Forward the request body; returns leftover bytes after it."""
        if headers.get("transfer-encoding", "").lower() == "chunked":
            return self._stream_chunked(buf, self.client, upstream)
        length = int(headers.get("content-length", "0") or "0")
        while length > 0:
            if buf:
                take, buf = buf[:length], buf[length:]
                upstream.sendall(take)
                length -= len(take)
                continue
            chunk = self.client.recv(min(_RECV, length))
            if not chunk:
                return None
            upstream.sendall(chunk)
            length -= len(chunk)
        return buf

    def _stream_chunked(self, buf: bytes, src: socket.socket,
                        dst: socket.socket) -> bytes | None:
        # Opaque pass-through until the 0-length terminator.
        while True:
            while b"\r\n" not in buf:
                chunk = src.recv(_RECV)
                if not chunk:
                    return None
                buf += chunk
            line, rest = buf.split(b"\r\n", 1)
            try:
                size = int(line.split(b";")[0], 16)
            except ValueError:
                return None
            need = size + 2  # payload + CRLF
            while len(rest) < need:
                chunk = src.recv(_RECV)
                if not chunk:
                    return None
                rest += chunk
            dst.sendall(line + b"\r\n" + rest[:need])
            buf = rest[need:]
            if size == 0:
                return buf

    def _relay_response(self, upstream: socket.socket) -> bool:
        """Stream the upstream response back; returns False when the client
        connection cannot be reused."""
        buf = b""
        while b"\r\n\r\n" not in buf:
            chunk = upstream.recv(_RECV)
            if not chunk:
                return False
            buf += chunk
        head_end = buf.find(b"\r\n\r\n") + 4
        head = buf[:head_end]
        self.client.sendall(head)
        rest = buf[head_end:]
        try:
            _, _, _, headers, _ = _parse_head(head)
        except ValueError:
            headers = {}
        if headers.get("transfer-encoding", "").lower() == "chunked":
            leftover = self._stream_chunked(rest, upstream, self.client)
            return leftover is not None
        if "content-length" in headers:
            length = int(headers["content-length"]) - len(rest)
            if rest:
                self.client.sendall(rest)
            while length > 0:
                chunk = upstream.recv(min(_RECV, length))
                if not chunk:
                    return False
                self.client.sendall(chunk)
                length -= len(chunk)
            return True
        # No framing: stream until upstream closes, then the connection dies.
        if rest:
            self.client.sendall(rest)
        while True:
            chunk = upstream.recv(_RECV)
            if not chunk:
                return False
            self.client.sendall(chunk)

    _status_text = {400: "Bad Request", 403: "Forbidden", 502: "Bad Gateway"}

    def _reject(self, status: int) -> None:
        text = self._status_text.get(status, "Error")
        body = f"{status} {text}\n".encode()
        try:
            self.client.sendall(
                b"HTTP/1.1 %d %s\r\nContent-Length: %d\r\n"
                b"Connection: close\r\n\r\n%s"
                % (status, text.encode(), len(body), body))
        except OSError:
            pass


class HttpProxy:
    """Loopback listener pair (v4 + v6 when available) for redirected flows."""

    def __init__(self, rules: list[HttpRule], audit_log=None):
        self.rules = list(rules)
        self.audit_log = audit_log
        self._listeners: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self.addr_v4: tuple[str, int] | None = None
        self.addr_v6: tuple[str, int] | None = None

    def audit(self, **fields) -> None:
        if self.audit_log is not None:
            self.audit_log.log("http", **fields)

    def start(self) -> "HttpProxy":
        v4 = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        v4.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        v4.bind(("127.0.0.1", 0))
        v4.listen(64)
        self.addr_v4 = v4.getsockname()[:2]
        self._listeners.append(v4)
        try:
            v6 = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
            v6.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            v6.bind(("::1", 0))
            v6.listen(64)
            self.addr_v6 = v6.getsockname()[:2]
            self._listeners.append(v6)
        except OSError:
            self.addr_v6 = None
        for listener in self._listeners:
            t = threading.Thread(target=self._accept_loop, args=(listener,),
                                 daemon=True, name="sbx-proxy-accept")
            t.start()
            self._threads.append(t)
        return self

    def _accept_loop(self, listener: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                client, peer = listener.accept()
            except OSError:
                return
            _Connection(self, client, peer[:2]).start()

    def stop(self) -> None:
        self._stop.set()
        for listener in self._listeners:
            try:
                listener.close()
            except OSError:
                pass
