"""The confinement pipeline: fork, confine the child, hand the notification
descriptor to the parent, synchronize, exec.

Child-side order is fixed: new process group, optional chdir,
no-new-privileges, static ruleset, syscall filter with listener, then block
until the parent confirms the supervisor is attached, close inherited
descriptors, exec. The parent pulls the listener out of the child with
pidfd_getfd and only signals readiness once the supervisor loop is running,
so there is no window where an intercepted syscall could run unnoticed.
"""

from __future__ import annotations

import logging
import os
import select
import shutil
import signal
import struct
import threading
import time
from dataclasses import dataclass

from . import resources as resources_mod
from .audit import AuditLog
from .cow import SeccompCowBackend
from .hook import HookRuntime
from .kernel import landlock, linux, seccomp
from .kernel.fake import FakeLaunchRecorder
from .kernel.seccomp import NotifyChannel
from .netpolicy import NetHandlers, net_state_for
from .policy import (Access, EffectAction, EnforcementPlan, PathPolicy,
                     PathRule, STATIC_FS_SYSCALLS, PolicyError)
from .resources import (CpuThrottle, ResourceHandlers, ResourceLedger,
                        apply_fd_limit)
from .supervisor import HandlerTable, Supervisor, SupervisorState
from .tracer import TraceEngine
from .vfs import VfsHandlers

log = logging.getLogger(__name__)

LANDLOCK_ABI_FLOOR = 6

CHILD_STEPS = ("setpgid", "chdir", "no_new_privs", "landlock", "seccomp",
               "ready", "close_fds", "exec")

_NET_NOTIFY = ("connect", "bind", "sendto", "sendmsg", "sendmmsg")

DEFAULT_ENV_ALLOW = ("PATH", "HOME", "LANG", "LC_ALL", "TERM", "TZ", "USER")


class LaunchError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureReport:
    landlock_abi: int
    fs_rules: bool
    tcp_rules: bool
    ipc_scoping: bool
    seccomp_notify: bool
    fd_transfer: bool
    ptrace: bool

    def lines(self) -> list[str]:
        def mark(flag: bool) -> str:
            return "supported" if flag else "unsupported"
        return [
            f"landlock abi:        {self.landlock_abi}",
            f"landlock fs rules:   {mark(self.fs_rules)}",
            f"landlock tcp rules:  {mark(self.tcp_rules)}",
            f"landlock ipc scope:  {mark(self.ipc_scoping)}",
            f"seccomp notify:      {mark(self.seccomp_notify)}",
            f"fd transfer (pidfd): {mark(self.fd_transfer)}",
            f"ptrace (freeze):     {mark(self.ptrace)}",
        ]


def check_kernel(probe_ptrace: bool = True) -> FeatureReport:
    """Per-feature support of the running kernel; absence is data."""
    abi_level = landlock.probe_abi()
    return FeatureReport(
        landlock_abi=abi_level,
        fs_rules=abi_level >= 1,
        tcp_rules=abi_level >= 4,
        ipc_scoping=abi_level >= 6,
        seccomp_notify=seccomp.notify_action_available(),
        fd_transfer=linux.pidfd_available(),
        ptrace=linux.ptrace_available() if probe_ptrace else False,
    )


@dataclass(frozen=True)
class StdioSpec:
    stdin: object = "inherit"   # "inherit" | "null" | "pipe" | fd
    stdout: object = "inherit"
    stderr: object = "inherit"


@dataclass(frozen=True)
class LaunchOptions:
    # "landlock" installs the kernel ruleset and refuses below the ABI floor;
    # "supervised" is the explicit, documented fallback that enforces the
    # static scope in the supervisor via interception (weaker: metadata
    # syscalls are unscoped). Never chosen silently.
    static_enforcement: str = "landlock"
    stdio: StdioSpec = StdioSpec()
    env_allow: tuple[str, ...] = DEFAULT_ENV_ALLOW
    env_set: tuple[tuple[str, str], ...] = ()
    handshake_timeout: float = 5.0
    audit_path: str | None = None
    policy_callback: object = None
    clone3_mode: str = resources_mod.CLONE3_MODE_INSPECT
    trace_pipe: bool = False  # instrument child steps for ordering tests
    supervisor_workers: int = 8


@dataclass
class SandboxResult:
    exit_code: int
    term_signal: int | None
    duration: float
    stats: dict
    audits: list
    handler_errors: list
    effect: dict | None = None
    terminate_reason: str | None = None


class SandboxHandle:
    """One launched sandbox: pids, channels, supervisor, effect handle."""

    def __init__(self, pid: int, supervisor: Supervisor,
                 state: SupervisorState, workspace, engine: TraceEngine | None,
                 throttle: CpuThrottle | None, proxy, started_at: float,
                 err_r: int, trace_r: int | None, stdio_fds: dict):
        self.pid = pid
        self.pgid = pid
        self.supervisor = supervisor
        self.state = state
        self.workspace = workspace
        self.engine = engine
        self.throttle = throttle
        self.proxy = proxy
        self.started_at = started_at
        self._err_r = err_r
        self._trace_r = trace_r
        self.stdin_fd = stdio_fds.get("stdin")
        self.stdout_fd = stdio_fds.get("stdout")
        self.stderr_fd = stdio_fds.get("stderr")
        self._result: SandboxResult | None = None
        self._wait_lock = threading.Lock()

    # -- lifecycle ---------------------------------------------------------

    def wait(self, timeout: float | None = None) -> SandboxResult:
        with self._wait_lock:
            if self._result is not None:
                return self._result
            status = self._wait_status(timeout)
            duration = time.monotonic() - self.started_at
            self._teardown()
            exec_error = self._read_exec_error()
            exit_code, term_signal = _decode_status(status)
            report = self.supervisor.wait(timeout=5)
            ledger = self.state.ledger
            self._result = SandboxResult(
                exit_code=exit_code,
                term_signal=term_signal,
                duration=duration,
                stats=report.stats.snapshot() if report else
                self.state.stats.snapshot(),
                audits=list(self.state.hook.audits) if self.state.hook else [],
                handler_errors=list(self.state.handler_errors),
                terminate_reason=(ledger.terminate_reason if ledger else None),
            )
            if exec_error:
                self._result.handler_errors.append(f"exec: {exec_error}")
                if exit_code == 127 and self._result.term_signal is None:
                    pass  # conventional shell-style code already set
            return self._result

    def _wait_status(self, timeout: float | None) -> int:
        if self.engine is not None:
            status = self.engine.wait_exit(timeout)
            if status is None:
                raise TimeoutError("sandbox did not exit in time")
            return status
        if timeout is None:
            return os.waitpid(self.pid, 0)[1]
        deadline = time.monotonic() + timeout
        while True:
            pid, status = os.waitpid(self.pid, os.WNOHANG)
            if pid == self.pid:
                return status
            if time.monotonic() > deadline:
                raise TimeoutError("sandbox did not exit in time")
            time.sleep(0.005)

    def _teardown(self) -> None:
        if self.throttle is not None:
            self.throttle.stop()
        if self.engine is not None:
            self.engine.shutdown()
        if self.proxy is not None:
            self.proxy.stop()
        if self.state.hook is not None:
            self.state.hook.shutdown()

    def _read_exec_error(self) -> str | None:
        if self._err_r is None:
            return None
        try:
            data = b""
            while True:
                r, _, _ = select.select([self._err_r], [], [], 0)
                if not r:
                    break
                chunk = os.read(self._err_r, 4096)
                if not chunk:
                    break
                data += chunk
            return data.decode(errors="replace") or None
        except OSError:
            return None
        finally:
            try:
                os.close(self._err_r)
            except OSError:
                pass

    def read_trace_steps(self) -> list[str]:
        if self._trace_r is None:
            return []
        out = b""
        while True:
            r, _, _ = select.select([self._trace_r], [], [], 0.2)
            if not r:
                break
            chunk = os.read(self._trace_r, 4096)
            if not chunk:
                break
            out += chunk
        return out.decode().split()

    def kill(self, sig: int = signal.SIGKILL) -> None:
        try:
            os.killpg(self.pgid, sig)
        except ProcessLookupError:
            pass

    def finalize(self, action: EffectAction | None = None,
                 dry_run: bool = False):
        if self.workspace is None:
            return None
        return self.workspace.finalize(action or EffectAction.ABORT,
                                       dry_run=dry_run)


def _decode_status(status: int) -> tuple[int, int | None]:
    if os.WIFSIGNALED(status):
        sig = os.WTERMSIG(status)
        return 128 + sig, sig
    return os.WEXITSTATUS(status), None


def _resolve_stdio(spec: StdioSpec) -> tuple[dict, dict, list[int]]:
    """(child fd map, parent-side fds, fds to close in parent after fork)."""
    child: dict[int, int] = {}
    parent: dict[str, int] = {}
    close_after: list[int] = []
    for idx, (name, value) in enumerate(
            (("stdin", spec.stdin), ("stdout", spec.stdout),
             ("stderr", spec.stderr))):
        if value == "inherit":
            continue
        if value == "null":
            fd = os.open(os.devnull, os.O_RDONLY if idx == 0 else os.O_WRONLY)
            child[idx] = fd
            close_after.append(fd)
        elif value == "pipe":
            r, w = os.pipe()
            if idx == 0:
                child[idx] = r
                parent[name] = w
                close_after.append(r)
            else:
                child[idx] = w
                parent[name] = r
                close_after.append(w)
        elif isinstance(value, int):
            child[idx] = value
        else:
            raise LaunchError(f"bad stdio spec for {name}: {value!r}")
    return child, parent, close_after


def _build_env(options: LaunchOptions) -> dict[str, str]:
    env = {k: v for k, v in os.environ.items() if k in options.env_allow}
    env.update(dict(options.env_set))
    return env


def _filter_config(plan: EnforcementPlan, options: LaunchOptions,
                   ) -> tuple[frozenset[str], str]:
    """(notify set, inet socket restriction) for this launch mode."""
    notify = set(plan.notify_syscalls)
    has_net_rules = bool(plan.spec.endpoints or plan.spec.http)
    if options.static_enforcement == "supervised":
        if plan.static_fs or plan.spec.cow is not None:
            notify.update(STATIC_FS_SYSCALLS)
        if has_net_rules and plan.direct_network:
            # The port decision is fixed at connect time; established TCP
            # traffic cannot be re-targeted, so sends stay unmediated and
            # the direct path keeps its no-per-message-cost property.
            notify.update(("connect", "bind"))
        elif has_net_rules:
            notify.update(_NET_NOTIFY)
    if not has_net_rules and not plan.spec.runtime.enabled:
        socket_mode = "deny_inet"
    elif plan.direct_network:
        socket_mode = "tcp_only"
    else:
        socket_mode = "none"
    return frozenset(notify), socket_mode


def _check_floor(plan: EnforcementPlan, options: LaunchOptions,
                 features: FeatureReport) -> None:
    if options.static_enforcement == "landlock":
        if features.landlock_abi < LANDLOCK_ABI_FLOOR:
            raise LaunchError(
                f"Landlock ABI below required floor: kernel provides "
                f"{features.landlock_abi}, need >= {LANDLOCK_ABI_FLOOR}. "
                f"Refusing to launch with a weaker static layer.")
    elif options.static_enforcement != "supervised":
        raise LaunchError(
            f"unknown static enforcement mode {options.static_enforcement!r}")
    if not features.seccomp_notify:
        raise LaunchError("seccomp user notification unavailable")
    if not features.fd_transfer:
        raise LaunchError("pidfd descriptor transfer unavailable")


def _landlock_inputs(plan: EnforcementPlan) -> tuple[list[str], list[str]]:
    reads, writes = [], []
    for rule in plan.static_fs:
        if rule.access is Access.READ:
            reads.append(rule.path)
        elif rule.access is Access.WRITE:
            writes.append(rule.path)
        # deny rules are the absence of a grant for Landlock; the supervisor
        # path policy enforces deeper-deny precedence on intercepted opens.
    if plan.spec.cow is not None:
        reads.append(plan.spec.cow.lower_root)
    return reads, writes


def build_supervisor_state(plan: EnforcementPlan, options: LaunchOptions,
                           initial_cwd: str) -> tuple[SupervisorState,
                                                      HandlerTable, object]:
    """Wire policy tables, workspace, handlers. Shared by launch and tests."""
    audit = AuditLog(options.audit_path)
    state = SupervisorState(plan, audit=audit)

    rules = list(plan.static_fs)
    workspace = None
    if plan.spec.cow is not None:
        cow = plan.spec.cow
        workspace = SeccompCowBackend(cow.lower_root, cow.workspace_dir,
                                      cow.quota_bytes)
        rules.append(PathRule(cow.lower_root, Access.READ))
        rules.append(PathRule(cow.lower_root, Access.WRITE))
    state.path_policy = PathPolicy(rules)
    state.workspace = workspace

    proxy = None
    if plan.spec.http:
        from .httpproxy import HttpProxy
        proxy = HttpProxy(list(plan.spec.http), audit_log=audit).start()
    state.net = net_state_for(
        plan,
        proxy_v4=proxy.addr_v4 if proxy else None,
        proxy_v6=proxy.addr_v6 if proxy else None)

    ledger = None
    if (plan.spec.resources.max_processes is not None
            or plan.spec.resources.max_memory is not None):
        ledger = ResourceLedger(limits=plan.spec.resources)
        ledger.clone3_mode = options.clone3_mode
    elif plan.spec.cow is not None or plan.spec.runtime.enabled:
        ledger = ResourceLedger(limits=plan.spec.resources)
        ledger.clone3_mode = options.clone3_mode
    state.ledger = ledger

    table = HandlerTable()
    vfs = VfsHandlers(state, workspace.layers() if workspace else None,
                      initial_cwd,
                      read_bypass=(plan.spec.cow.read_bypass
                                   if plan.spec.cow else False))
    state.vfs = vfs
    vfs.register_into(table)
    NetHandlers(state).register_into(table)
    ResourceHandlers(state).register_into(table)
    return state, table, proxy


def launch(plan: EnforcementPlan, cmd: list[str] | None,
           options: LaunchOptions = LaunchOptions(),
           closure=None, keep_fds: tuple[int, ...] = ()) -> SandboxHandle:
    """Start one confined command; returns once the child is exec'ing.

    With `closure` instead of `cmd`, the child runs the callable after the
    confinement steps rather than exec'ing (the fork-runtime entry point);
    `keep_fds` names descriptors the closure still needs.
    """
    features = check_kernel(probe_ptrace=plan.spec.runtime.enabled
                            and not plan.spec.runtime.freeze_disabled)
    _check_floor(plan, options, features)
    if plan.spec.runtime.enabled and not plan.spec.runtime.freeze_disabled \
            and not features.ptrace:
        raise LaunchError("runtime hook needs ptrace for the freeze protocol")

    env = _build_env(options)
    if closure is None:
        if not cmd:
            raise LaunchError("no command given")
        argv0 = shutil.which(cmd[0], path=env.get("PATH", "")) \
            if "/" not in cmd[0] else cmd[0]
        if argv0 is None or not os.path.exists(argv0):
            raise LaunchError(f"command not found: {cmd[0]}")
    else:
        argv0 = None
    cwd = plan.spec.cwd or os.getcwd()

    notify, socket_mode = _filter_config(plan, options)
    prog = seccomp.build_filter(notify=notify, socket_mode=socket_mode)

    child_stdio, parent_stdio, close_after = _resolve_stdio(options.stdio)
    sync_r, sync_w = os.pipe()
    ready_r, ready_w = os.pipe()
    err_r, err_w = os.pipe2(os.O_CLOEXEC)
    trace_r = trace_w = None
    if options.trace_pipe:
        trace_r, trace_w = os.pipe2(os.O_CLOEXEC)

    use_landlock = options.static_enforcement == "landlock"
    ll_reads, ll_writes = _landlock_inputs(plan)

    started_at = time.monotonic()
    pid = os.fork()
    if pid == 0:
        _child_main(plan, argv0, cmd, env, cwd, child_stdio, prog,
                    sync_w, ready_r, err_w, trace_w,
                    use_landlock, ll_reads, ll_writes,
                    closure=closure, keep_fds=keep_fds)
        os._exit(126)  # not reached

    for fd in close_after + [sync_w, ready_r, err_w]:
        os.close(fd)
    if trace_w is not None:
        os.close(trace_w)

    try:
        lfd = _read_listener_number(sync_r, pid, options.handshake_timeout)
        notify_fd = linux.grab_fd(pid, lfd)
    except Exception as exc:
        _kill_tree(pid)
        raise LaunchError(f"confinement handshake failed: {exc}") from exc
    finally:
        os.close(sync_r)

    channel = NotifyChannel(notify_fd, pid)
    state, table, proxy = build_supervisor_state(plan, options, cwd)
    state.channel = channel
    state.child_pid = pid
    state.pgid = pid
    if state.ledger is not None:
        state.ledger.attach(pid, pid)

    engine = None
    if plan.spec.runtime.enabled and not plan.spec.runtime.freeze_disabled:
        try:
            engine = TraceEngine(pid).start()
        except Exception as exc:
            _kill_tree(pid)
            raise LaunchError(f"tracer attach failed: {exc}") from exc
    if plan.spec.runtime.enabled:
        hook = HookRuntime(plan.spec.runtime, options.policy_callback,
                           state, engine)
        state.hook = hook
        hook.register_into(table)

    supervisor = Supervisor(channel, table, state,
                            workers=options.supervisor_workers)
    supervisor.start()

    throttle = None
    if plan.spec.resources.max_cpu is not None \
            and plan.spec.resources.max_cpu < 1.0:
        throttle = CpuThrottle(pid, plan.spec.resources.max_cpu).start()

    os.write(ready_w, b"\x01")
    os.close(ready_w)

    return SandboxHandle(pid, supervisor, state, state.workspace, engine,
                         throttle, proxy, started_at, err_r, trace_r,
                         parent_stdio)


def _read_listener_number(sync_r: int, pid: int, timeout: float) -> int:
    deadline = time.monotonic() + timeout
    buf = b""
    while len(buf) < 4:
        remain = deadline - time.monotonic()
        if remain <= 0:
            raise TimeoutError("child did not install its filter in time")
        r, _, _ = select.select([sync_r], [], [], remain)
        if not r:
            continue
        chunk = os.read(sync_r, 4 - len(buf))
        if not chunk:
            raise LaunchError("child exited during confinement setup")
        buf += chunk
    return struct.unpack("I", buf)[0]


def _kill_tree(pid: int) -> None:
    try:
        os.killpg(pid, signal.SIGKILL)
    except OSError:
        try:
            os.kill(pid, signal.SIGKILL)
        except OSError:
            pass
    try:
        os.waitpid(pid, 0)
    except OSError:
        pass


def _child_main(plan, argv0, cmd, env, cwd, child_stdio, prog,
                sync_w, ready_r, err_w, trace_w,
                use_landlock, ll_reads, ll_writes,
                closure=None, keep_fds: tuple[int, ...] = ()) -> None:
    """Runs in the forked child; must not touch shared locks or allocate
    beyond small objects. Never returns."""

    def trace(step: str) -> None:
        if trace_w is not None:
            os.write(trace_w, (step + "\n").encode())

    def fail(msg: str) -> None:
        try:
            os.write(err_w, msg.encode()[:4096])
        except OSError:
            pass
        os._exit(127)

    try:
        os.setpgid(0, 0)
        trace("setpgid")
        for target, fd in child_stdio.items():
            os.dup2(fd, target)
        linux.set_parent_death_signal()
        if cwd:
            try:
                os.chdir(cwd)
            except OSError as exc:
                fail(f"chdir({cwd}): {exc}")
        trace("chdir")
        linux.set_no_new_privs()
        trace("no_new_privs")
        if use_landlock:
            landlock.apply_ruleset(ll_reads, ll_writes,
                                   plan.static_tcp_ports,
                                   scope_ipc=plan.static_ipc_scoped)
        trace("landlock")
        lfd = seccomp.install_filter(prog)
        trace("seccomp")
        os.write(sync_w, struct.pack("I", lfd))
        got = os.read(ready_r, 1)
        if got != b"\x01":
            fail("parent never signaled readiness")
        trace("ready")
        keep = {err_w} | set(keep_fds)
        if trace_w is not None:
            keep.add(trace_w)
        _close_all_except(keep)
        # Descriptor budget applies once the inherited fds are gone; already
        # open descriptors (stdio) are unaffected by the new ceiling.
        apply_fd_limit(plan.spec.resources.max_fds)
        trace("close_fds")
        if closure is not None:
            os.close(err_w)
            rc = closure()
            os._exit(rc if isinstance(rc, int) else 0)
        trace("exec")
        os.execve(argv0, cmd, env)
    except SystemExit:
        raise
    except BaseException as exc:  # noqa: BLE001 - must report, then die
        fail(f"confinement setup failed: {exc!r}")
    fail("execve returned")


def _close_all_except(keep: set[int]) -> None:
    spans_start = 3
    for fd in sorted(keep) + [1 << 20]:
        if fd > spans_start:
            linux.close_range(spans_start, fd - 1)
        spans_start = fd + 1


def confine_self(plan: EnforcementPlan) -> None:
    """Irreversibly drop the calling process to the plan's static policy.

    Only plans with no dynamic layer qualify: the supervisor needs a separate
    parent process, which self-confinement by definition does not have.
    """
    if plan.supervisor_handlers or plan.notify_syscalls:
        raise PolicyError(
            "self-confinement cannot host the dynamic layer; "
            "this plan routes syscalls to a supervisor")
    features = check_kernel(probe_ptrace=False)
    if features.landlock_abi < LANDLOCK_ABI_FLOOR:
        raise LaunchError(
            f"Landlock ABI below required floor: {features.landlock_abi}")
    linux.set_no_new_privs()
    ll_reads, ll_writes = _landlock_inputs(plan)
    landlock.apply_ruleset(ll_reads, ll_writes, plan.static_tcp_ports,
                           scope_ipc=plan.static_ipc_scoped)
    has_net = bool(plan.spec.endpoints or plan.spec.http)
    prog = seccomp.build_filter(
        notify=frozenset(),
        socket_mode="deny_inet" if not has_net else "tcp_only")
    seccomp.install_filter(prog, new_listener=False)


def simulate_child_steps(plan: EnforcementPlan, options: LaunchOptions,
                         recorder: FakeLaunchRecorder) -> None:
    """Drive the child-side sequence against a recorder: the ordering logic
    is assertable on any platform, no fork or kernel needed."""
    notify, socket_mode = _filter_config(plan, options)
    recorder.record("setpgid")
    recorder.record("chdir", plan.spec.cwd)
    recorder.record("no_new_privs")
    if recorder.landlock_abi < LANDLOCK_ABI_FLOOR:
        raise LaunchError("Landlock ABI below required floor")
    recorder.record("landlock", _landlock_inputs(plan))
    recorder.record("seccomp", notify)
    recorder.record("ready")
    recorder.record("close_fds")
    recorder.record("exec")
