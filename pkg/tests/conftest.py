import os
import socket
import threading

import pytest

from splitbox.launcher import LaunchOptions, StdioSpec, check_kernel
from splitbox.policy import Access, PathRule

BASE_READ = ("/usr", "/lib", "/lib64", "/etc", "/bin")


def base_fs_rules(*extra_read, write=()):
    rules = [PathRule(p, Access.READ) for p in BASE_READ + tuple(extra_read)]
    rules += [PathRule(p, Access.WRITE) for p in write]
    return tuple(rules)


@pytest.fixture(scope="session")
def features():
    return check_kernel()


@pytest.fixture(scope="session")
def live(features):
    """Skip unless the interception stack runs on this host."""
    if not (features.seccomp_notify and features.fd_transfer):
        pytest.skip("seccomp user notification or pidfd transfer unavailable")
    return features


@pytest.fixture(scope="session")
def live_ptrace(live):
    if not live.ptrace:
        pytest.skip("ptrace unavailable")
    return live


@pytest.fixture(scope="session")
def live_landlock(features):
    if features.landlock_abi < 6:
        pytest.skip("Landlock ABI below floor on this kernel")
    return features


@pytest.fixture()
def supervised_opts():
    return LaunchOptions(static_enforcement="supervised",
                         stdio=StdioSpec(stdout="pipe", stderr="pipe"))


def drain_fd(fd, timeout=10.0):
    """Read an fd to EOF from a thread; returns a handle with .get()."""
    chunks = []
    done = threading.Event()

    def run():
        while True:
            try:
                chunk = os.read(fd, 65536)
            except OSError:
                break
            if not chunk:
                break
            chunks.append(chunk)
        done.set()

    threading.Thread(target=run, daemon=True).start()

    class Result:
        def get(self):
            done.wait(timeout)
            return b"".join(chunks)

    return Result()


class EchoServer:
    """Loopback TCP echo counting accepted connections."""

    def __init__(self):
        self.sock = socket.socket()
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(128)
        self.port = self.sock.getsockname()[1]
        self.accepted = 0
        self.peers = []
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        while True:
            try:
                conn, peer = self.sock.accept()
            except OSError:
                return
            with self._lock:
                self.accepted += 1
                self.peers.append(peer)
            threading.Thread(target=self._echo, args=(conn,),
                             daemon=True).start()

    def _echo(self, conn):
        try:
            while True:
                data = conn.recv(65536)
                if not data:
                    return
                conn.sendall(data)
        except OSError:
            pass
        finally:
            conn.close()

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


@pytest.fixture()
def echo_server():
    server = EchoServer()
    yield server
    server.close()
