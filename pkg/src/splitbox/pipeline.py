"""Stage composition: kernel-pipe pipelines of heterogeneously confined
stages, and the fork runtime that initializes once and forks N confined
workers sharing pages copy-on-write.

Each stage is its own sandbox process tree with its own supervisor; the only
coupling between stages is the pipe. A worker's outputs come back over a
framed channel in slot order; a crashed worker fails its slot and nothing
else.
"""

from __future__ import annotations

import logging
import os
import selectors
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .launcher import LaunchError, LaunchOptions, SandboxHandle, StdioSpec, launch
from .policy import (EnforcementPlan, SandboxSpec, compile_plan,
                     pin_resolution, validate)

log = logging.getLogger(__name__)

_OUTPUT_CAP_DEFAULT = 1 << 20


@dataclass
class Stage:
    spec: SandboxSpec
    cmd: list[str]
    options: LaunchOptions = field(default_factory=LaunchOptions)
    position: int = 0

    def plan(self) -> EnforcementPlan:
        norm = validate(self.spec)
        return compile_plan(norm, pin_resolution(norm))


@dataclass
class StageResult:
    position: int
    exit_code: int | None
    term_signal: int | None
    stats: dict
    audits: list
    error: str | None = None


@dataclass
class PipelineResult:
    stages: list[StageResult]
    stdout: bytes

    @property
    def ok(self) -> bool:
        return all(s.exit_code == 0 for s in self.stages)


def run_pipeline(stages: Sequence[Stage], stdin: bytes | str | None = None,
                 capture_stderr: bool = False) -> PipelineResult:
    """stage[i].stdout -> stage[i+1].stdin over kernel pipes, all stages
    concurrent; statuses are reported for every stage even when one fails.

    stdin: bytes feed the first stage; "inherit" wires the caller's own
    stdin through (what the CLI wants); None gives the first stage /dev/null.
    """
    if not stages:
        raise ValueError("pipeline needs at least one stage")
    handles: list[SandboxHandle] = []
    pipes: list[tuple[int, int]] = [os.pipe() for _ in range(len(stages) - 1)]
    stdin_pipe = os.pipe() if isinstance(stdin, bytes) else None
    out_r, out_w = os.pipe()

    try:
        for i, stage in enumerate(stages):
            if i == 0:
                if stdin_pipe:
                    in_spec = stdin_pipe[0]
                elif stdin == "inherit":
                    in_spec = "inherit"
                else:
                    in_spec = "null"
            else:
                in_spec = pipes[i - 1][0]
            out_spec = pipes[i][1] if i < len(stages) - 1 else out_w
            stdio = StdioSpec(stdin=in_spec, stdout=out_spec,
                              stderr="pipe" if capture_stderr else "inherit")
            options = _with_stdio(stage.options, stdio)
            handles.append(launch(stage.plan(), stage.cmd, options))
    except LaunchError:
        for h in handles:
            h.kill()
            try:
                h.wait(timeout=5)
            except Exception:
                pass
        for r, w in pipes:
            _close_quiet(r, w)
        if stdin_pipe:
            _close_quiet(*stdin_pipe)
        _close_quiet(out_r, out_w)
        raise

    # Parent-side copies of the stage-to-stage fds must close so EOF
    # propagates when a stage exits.
    for r, w in pipes:
        _close_quiet(r, w)
    _close_quiet(out_w)

    if stdin_pipe is not None:
        _close_quiet(stdin_pipe[0])

        def feed():
            try:
                os.write(stdin_pipe[1], stdin)
            except OSError:
                pass
            finally:
                _close_quiet(stdin_pipe[1])

        threading.Thread(target=feed, daemon=True).start()

    chunks: list[bytes] = []

    def drain():
        while True:
            try:
                chunk = os.read(out_r, 65536)
            except OSError:
                break
            if not chunk:
                break
            chunks.append(chunk)

    drainer = threading.Thread(target=drain, daemon=True)
    drainer.start()

    results = []
    for i, handle in enumerate(handles):
        try:
            res = handle.wait(timeout=300)
            results.append(StageResult(i, res.exit_code, res.term_signal,
                                       res.stats, res.audits))
        except Exception as exc:
            handle.kill()
            results.append(StageResult(i, None, None, {}, [], error=str(exc)))
    drainer.join(timeout=10)
    _close_quiet(out_r)
    return PipelineResult(results, b"".join(chunks))


def _with_stdio(options: LaunchOptions, stdio: StdioSpec) -> LaunchOptions:
    from dataclasses import replace
    return replace(options, stdio=stdio)


def _close_quiet(*fds: int) -> None:
    for fd in fds:
        try:
            os.close(fd)
        except OSError:
            pass


@dataclass
class ForkPlan:
    """Initialization once, then N forked workers from the initialized image.

    Closure form: `init` returns the worker callable; each worker runs
    worker_fn(input) in its own forked, confined process and its return value
    (str/bytes) is the slot output. Command form: `init_cmd` runs to
    completion, then each worker execs `worker_cmd` with the slot input
    substituted for "{}" (argv mode) or written to stdin (stdin mode).
    """

    workers: int
    init: Callable[[], Callable] | None = None
    init_cmd: list[str] | None = None
    worker_cmd: list[str] | None = None
    inputs: Sequence[str] | None = None
    input_mode: str = "argv"  # argv | stdin
    concurrency: int = 8
    output_cap: int = _OUTPUT_CAP_DEFAULT
    reducer: Stage | None = None


@dataclass
class WorkerResult:
    index: int
    status: int
    output: bytes
    error: str | None = None


@dataclass
class ForkRunResult:
    workers: list[WorkerResult]
    reduced: bytes | None
    elapsed: float
    forks_per_second: float


def run_cow_fork(plan: ForkPlan, spec: SandboxSpec,
                 options: LaunchOptions = LaunchOptions()) -> ForkRunResult:
    """Run the fork plan inside one confined tree; outputs in slot order."""
    if plan.workers < 1:
        raise ValueError("worker count must be >= 1")
    if plan.init is None and plan.worker_cmd is None:
        raise ValueError("fork plan needs a closure or a worker command")
    inputs = list(plan.inputs or [str(i) for i in range(plan.workers)])
    while len(inputs) < plan.workers:
        inputs.append("")

    norm = validate(spec)
    eplan = compile_plan(norm, pin_resolution(norm))

    out_r, out_w = os.pipe()
    started = time.monotonic()

    def harness() -> int:
        return _fork_harness(plan, inputs, out_w)

    handle = launch(eplan, None, options, closure=harness, keep_fds=(out_w,))
    os.close(out_w)

    frames: dict[int, WorkerResult] = {}
    reader = threading.Thread(target=_read_frames, args=(out_r, frames),
                              daemon=True)
    reader.start()
    res = handle.wait(timeout=600)
    reader.join(timeout=30)
    elapsed = time.monotonic() - started

    workers = []
    for i in range(plan.workers):
        got = frames.get(i)
        workers.append(got if got is not None else WorkerResult(
            i, -1, b"", error="no result frame"))
    if res.exit_code != 0 and all(w.error for w in workers):
        raise LaunchError(
            f"fork harness failed (exit {res.exit_code}): "
            f"{res.handler_errors}")

    reduced = None
    if plan.reducer is not None:
        merged = b"".join(w.output for w in workers)
        reduced_res = run_pipeline([plan.reducer], stdin=merged)
        reduced = reduced_res.stdout

    return ForkRunResult(workers, reduced, elapsed,
                         plan.workers / elapsed if elapsed > 0 else 0.0)


def _read_frames(out_r: int, frames: dict[int, "WorkerResult"]) -> None:
    buf = b""

    def read_exact(n: int) -> bytes | None:
        nonlocal buf
        while len(buf) < n:
            try:
                chunk = os.read(out_r, 65536)
            except OSError:
                return None
            if not chunk:
                return None
            buf += chunk
        out, buf = buf[:n], buf[n:]
        return out

    while True:
        header = read_exact(32)
        if header is None:
            break
        try:
            idx, status, nbytes = (int(x) for x in header.split())
        except ValueError:
            break
        payload = read_exact(nbytes) if nbytes else b""
        if payload is None:
            break
        error = None
        if status < 0:
            error, payload = payload.decode(errors="replace"), b""
        frames[idx] = WorkerResult(idx, status, payload, error)
    try:
        os.close(out_r)
    except OSError:
        pass


def _send_frame(out_w: int, idx: int, status: int, payload: bytes) -> None:
    header = f"{idx} {status} {len(payload)}".encode().ljust(32)
    os.write(out_w, header + payload)


def _fork_harness(plan: ForkPlan, inputs: list[str], out_w: int) -> int:
    """Runs inside the confined child: init once, fork workers, frame
    outputs back to the host."""
    worker_fn = None
    if plan.init is not None:
        worker_fn = plan.init()
    elif plan.init_cmd is not None:
        rc = _run_cmd_inline(plan.init_cmd)
        if rc != 0:
            _send_frame(out_w, 0, -1, f"init exited {rc}".encode())
            return 1

    pending = list(range(plan.workers))
    running: dict[int, tuple[int, int, bytearray]] = {}  # pid -> (idx, fd, buf)
    sel = selectors.DefaultSelector()

    def spawn(idx: int) -> None:
        r, w = os.pipe()
        try:
            pid = os.fork()
        except OSError as exc:  # e.g. EAGAIN at the process cap
            os.close(r)
            os.close(w)
            _send_frame(out_w, idx, -1,
                        f"fork failed: errno {exc.errno}".encode())
            return
        if pid == 0:
            os.close(r)
            os.close(out_w)
            rc = 1
            try:
                if worker_fn is not None:
                    out = worker_fn(inputs[idx])
                    data = out if isinstance(out, bytes) else str(out).encode()
                    os.write(w, data)
                    rc = 0
                else:
                    argv = [a.replace("{}", inputs[idx])
                            for a in plan.worker_cmd]
                    os.dup2(w, 1)
                    if plan.input_mode == "stdin":
                        ir, iw = os.pipe()
                        wpid = os.fork()
                        if wpid == 0:
                            os.close(iw)
                            os.dup2(ir, 0)
                            os.execvp(argv[0], argv)
                            os._exit(127)
                        os.close(ir)
                        os.write(iw, inputs[idx].encode())
                        os.close(iw)
                        rc = os.waitstatus_to_exitcode(os.waitpid(wpid, 0)[1])
                    else:
                        os.execvp(argv[0], argv)
                        os._exit(127)
            except BaseException:
                rc = 1
            finally:
                try:
                    os.close(w)
                except OSError:
                    pass
            os._exit(rc if isinstance(rc, int) and rc >= 0 else 1)
        os.close(w)
        os.set_blocking(r, False)
        running[pid] = (idx, r, bytearray())
        sel.register(r, selectors.EVENT_READ, pid)

    def finish(pid: int) -> None:
        idx, fd, buf = running.pop(pid)
        sel.unregister(fd)
        # Drain whatever is left, then reap.
        os.set_blocking(fd, True)
        while True:
            try:
                chunk = os.read(fd, 65536)
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            if len(buf) > plan.output_cap:
                break
        os.close(fd)
        status = os.waitstatus_to_exitcode(os.waitpid(pid, 0)[1])
        if len(buf) > plan.output_cap:
            _send_frame(out_w, idx, -1, b"output overflow")
        elif status != 0:
            _send_frame(out_w, idx, -1, f"worker exited {status}".encode())
        else:
            _send_frame(out_w, idx, 0, bytes(buf))

    while pending or running:
        while pending and len(running) < max(1, plan.concurrency):
            spawn(pending.pop(0))
        if not running:
            continue
        events = sel.select(timeout=0.5)
        eof_pids = []
        for key, _ in events:
            pid = key.data
            idx, fd, buf = running[pid]
            try:
                chunk = os.read(fd, 65536)
            except BlockingIOError:
                continue
            except OSError:
                chunk = b""
            if chunk:
                buf += chunk
                if len(buf) > plan.output_cap:
                    eof_pids.append(pid)
            else:
                eof_pids.append(pid)
        for pid in set(eof_pids):
            if pid in running:
                finish(pid)
    sel.close()
    return 0


def _run_cmd_inline(cmd: list[str]) -> int:
    pid = os.fork()
    if pid == 0:
        os.execvp(cmd[0], cmd)
        os._exit(127)
    return os.waitstatus_to_exitcode(os.waitpid(pid, 0)[1])
