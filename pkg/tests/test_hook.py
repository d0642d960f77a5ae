"""Runtime hook: verdict mapping, event schema, tightening, live holds."""

import dataclasses
import errno
import json
import os
import threading

import pytest
from hypothesis import given, strategies as st

from conftest import base_fs_rules, drain_fd
from splitbox.hook import Event, map_callback_return
from splitbox.launcher import LaunchOptions, StdioSpec, launch
from splitbox.policy import (EndpointRule, PolicyError, Protocol,
                             ResourceLimits, RuntimeHookConfig, SandboxSpec,
                             compile_plan, pin_resolution, validate)
from splitbox.wireproto import WireCallback


def plan_for(spec, resolver=None):
    norm = validate(spec)
    return compile_plan(norm, pin_resolution(
        norm, resolver or (lambda h: ["127.0.0.1"])))


class TestVerdictMapping:
    def test_documented_returns(self):
        assert map_callback_return(0) == ("allow", 0)
        assert map_callback_return(False) == ("allow", 0)
        assert map_callback_return(None) == ("allow", 0)
        assert map_callback_return(True) == ("deny", errno.EPERM)
        assert map_callback_return(-1) == ("deny", errno.EPERM)
        assert map_callback_return(13) == ("deny", 13)
        assert map_callback_return("audit") == ("audit", 0)

    @given(st.one_of(st.integers(), st.booleans(), st.none(), st.text(),
                     st.floats(allow_nan=False), st.binary(),
                     st.lists(st.integers(), max_size=3)))
    def test_total_and_fail_closed(self, value):
        verdict, err = map_callback_return(value)
        assert verdict in ("allow", "deny", "audit")
        if verdict == "deny":
            assert err > 0
        known_allow = (value is None or value is False
                       or (isinstance(value, int)
                           and not isinstance(value, bool) and value == 0))
        if verdict == "allow":
            assert known_allow or value == 0
        if isinstance(value, str) and value != "audit":
            assert verdict == "deny"


class TestEventSchema:
    def test_no_path_field_by_schema(self):
        fields = {f.name for f in dataclasses.fields(Event)}
        assert "path" not in fields
        assert not any("path" in f for f in fields)
        assert fields == {"syscall", "category", "pid", "ppid", "net_dest",
                          "argv"}

    def test_argv_contains(self):
        event = Event("execve", "exec", 1, 0, argv=("/usr/bin/curl", "-s"))
        assert event.argv_contains("curl")
        assert not event.argv_contains("wget")
        assert not Event("openat", "file", 1, 0).argv_contains("x")

    def test_wire_form(self):
        event = Event("connect", "net", 5, 4,
                      net_dest=("tcp", "10.0.0.1", 80))
        wire = event.to_wire()
        assert wire["net"] == {"protocol": "tcp", "ip": "10.0.0.1",
                               "port": 80}
        assert "argv" not in wire and "path" not in json.dumps(wire)


class TestWireProtocol:
    def test_event_verdict_round_trip(self):
        ev_r, ev_w = os.pipe()
        vd_r, vd_w = os.pipe()
        callback = WireCallback(ev_w, vd_r)

        class Ctx:
            denied = []

            def deny_path(self, p):
                self.denied.append(p)

            def restrict_network(self, eps):
                self.denied.append(("net", tuple(eps)))

            def tighten_resources(self, limits):
                pass

        def peer():
            with os.fdopen(ev_r) as events, os.fdopen(vd_w, "w") as verdicts:
                msg = json.loads(events.readline())
                assert msg["syscall"] == "execve"
                verdicts.write(json.dumps(
                    {"id": msg["id"], "verdict": "audit",
                     "deny_path": "/etc/shadow"}) + "\n")
                verdicts.flush()

        t = threading.Thread(target=peer, daemon=True)
        t.start()
        ctx = Ctx()
        out = callback(Event("execve", "exec", 1, 0, argv=("curl",)), ctx)
        t.join(5)
        assert out == "audit"
        assert ctx.denied == ["/etc/shadow"]
        callback.close()


class TestLiveHolds:
    def hook_spec(self, categories=frozenset({"exec"}), **kw):
        return SandboxSpec(
            fs=base_fs_rules(),
            runtime=RuntimeHookConfig(enabled=True,
                                      categories=frozenset(categories)),
            **kw)

    def test_audit_on_exec(self, live_ptrace):
        events = []

        def callback(event, ctx):
            events.append(event)
            return "audit" if event.argv_contains("echo") else 0

        plan = plan_for(self.hook_spec())
        handle = launch(plan, ["/bin/echo", "flagged"],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stdout="pipe")))
        out = drain_fd(handle.stdout_fd)
        res = handle.wait(timeout=30)
        assert res.exit_code == 0 and out.get() == b"flagged\n"
        assert any(a["flag"] == "audit" for a in res.audits)
        assert events and events[0].category == "exec"
        assert events[0].argv == ("/bin/echo", "flagged")

    def test_positive_int_denies_with_that_errno(self, live_ptrace):
        def callback(event, ctx):
            return 13

        plan = plan_for(self.hook_spec())
        handle = launch(plan, ["/bin/echo", "never"],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stderr="pipe")))
        res = handle.wait(timeout=30)
        assert res.exit_code == 127  # exec denied with EACCES(13)

    def test_callback_exception_denies_and_audits(self, live_ptrace):
        def callback(event, ctx):
            raise RuntimeError("callback bug")

        plan = plan_for(self.hook_spec())
        handle = launch(plan, ["/bin/echo", "never"],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stderr="pipe")))
        res = handle.wait(timeout=30)
        assert res.exit_code == 127
        assert any("callback-error" in a["flag"] for a in res.audits)

    def test_freeze_disabled_denies_exec_eperm(self, live):
        def callback(event, ctx):
            return 0

        plan = plan_for(SandboxSpec(
            fs=base_fs_rules(),
            runtime=RuntimeHookConfig(enabled=True, freeze_disabled=True)))
        handle = launch(plan, ["/bin/echo", "never"],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stderr="pipe")))
        res = handle.wait(timeout=30)
        assert res.exit_code == 127
        assert any("freeze-unavailable" in a["flag"] for a in res.audits)

    def test_restrict_network_revokes_live(self, live_ptrace, echo_server):
        """Callback revokes egress on the first net event it observes."""
        port = echo_server.port
        revoked = threading.Event()

        def callback(event, ctx):
            if event.category == "net" and not revoked.is_set():
                revoked.set()
                ctx.restrict_network([])
            return 0

        spec = SandboxSpec(
            fs=base_fs_rules(),
            endpoints=(EndpointRule(Protocol.TCP, "127.0.0.1", port),),
            runtime=RuntimeHookConfig(enabled=True,
                                      categories=frozenset({"exec", "net"})))
        plan = plan_for(spec)
        child = (
            "import socket, sys\n"
            f"s = socket.socket(); s.connect(('127.0.0.1', {port}))\n"
            "s.sendall(b'one'); s.recv(8); s.close()\n"
            "try:\n"
            f"    s2 = socket.socket(); s2.connect(('127.0.0.1', {port}))\n"
            "    sys.exit(2)\n"
            "except OSError:\n"
            "    sys.exit(0)\n"
        )
        handle = launch(plan, ["/usr/bin/python3", "-c", child],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stdout="pipe",
                                                      stderr="pipe")))
        res = handle.wait(timeout=60)
        assert res.exit_code == 0, drain_fd(handle.stderr_fd).get()[:400]
        assert echo_server.accepted == 1

    def test_deny_path_tightening(self, live_ptrace, tmp_path):
        target = tmp_path / "watched"
        target.write_text("data")

        def callback(event, ctx):
            if event.category == "exec" and event.argv_contains("python3"):
                ctx.deny_path(str(target))
            return 0

        spec = SandboxSpec(
            fs=base_fs_rules(str(tmp_path)),
            runtime=RuntimeHookConfig(enabled=True))
        plan = plan_for(spec)
        child = (f"import sys\n"
                 f"try: open({str(target)!r})\n"
                 f"except PermissionError: sys.exit(0)\n"
                 f"sys.exit(2)\n")
        handle = launch(plan, ["/usr/bin/python3", "-c", child],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback,
                                      stdio=StdioSpec(stderr="pipe")))
        res = handle.wait(timeout=30)
        assert res.exit_code == 0

    def test_tighten_resources_monotonic(self, live_ptrace):
        errors = []

        def callback(event, ctx):
            try:
                ctx.tighten_resources(ResourceLimits(max_processes=2))
                try:
                    ctx.tighten_resources(ResourceLimits(max_processes=50))
                    errors.append("widening accepted")
                except PolicyError:
                    pass
            except Exception as exc:
                errors.append(repr(exc))
            return 0

        spec = SandboxSpec(fs=base_fs_rules(),
                           resources=ResourceLimits(max_processes=10),
                           runtime=RuntimeHookConfig(enabled=True))
        plan = plan_for(spec)
        handle = launch(plan, ["/bin/true"],
                        LaunchOptions(static_enforcement="supervised",
                                      policy_callback=callback))
        res = handle.wait(timeout=30)
        assert res.exit_code == 0
        assert not errors
        assert handle.state.ledger.limits.max_processes == 2
