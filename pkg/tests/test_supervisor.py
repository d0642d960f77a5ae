"""Supervisor loop semantics against the fake notification channel."""

import errno
import threading
import time

import pytest

from splitbox.kernel.fake import FakeChannel
from splitbox.kernel.seccomp import StaleNotification
from splitbox.policy import SandboxSpec, compile_plan, pin_resolution, validate
from splitbox.supervisor import (HandlerTable, Supervisor, SupervisorState,
                                 Verdict)


def make_supervisor(handlers=None, workers=4):
    norm = validate(SandboxSpec())
    plan = compile_plan(norm, pin_resolution(norm))
    state = SupervisorState(plan)
    channel = FakeChannel()
    state.channel = channel
    table = HandlerTable(handlers or {})
    sup = Supervisor(channel, table, state, workers=workers)
    sup.start()
    return sup, channel, state


def finish(sup, channel):
    channel.close_input()
    report = sup.wait(timeout=10)
    assert report is not None
    return report


class TestReplies:
    def test_unknown_notified_syscall_denied_eperm(self):
        sup, channel, state = make_supervisor({})
        nid = channel.inject("made_up_syscall")
        reply = channel.wait_reply(nid)
        assert reply.error == -errno.EPERM and not reply.continued
        report = finish(sup, channel)
        assert report.stats.denials == 1

    def test_allow_continues(self):
        sup, channel, _ = make_supervisor(
            {"dup": lambda n, s: Verdict.allow()})
        nid = channel.inject("dup")
        reply = channel.wait_reply(nid)
        assert reply.continued and reply.error == 0
        finish(sup, channel)

    def test_deny_carries_errno(self):
        sup, channel, _ = make_supervisor(
            {"connect": lambda n, s: Verdict.deny(errno.ECONNREFUSED)})
        nid = channel.inject("connect")
        reply = channel.wait_reply(nid)
        assert reply.error == -errno.ECONNREFUSED
        finish(sup, channel)

    def test_emulate_value(self):
        sup, channel, _ = make_supervisor(
            {"getcwd": lambda n, s: Verdict.emulate(17)})
        nid = channel.inject("getcwd")
        reply = channel.wait_reply(nid)
        assert reply.val == 17 and reply.error == 0 and not reply.continued
        finish(sup, channel)

    def test_handler_exception_fails_closed(self):
        def boom(notif, state):
            raise RuntimeError("handler bug")
        sup, channel, state = make_supervisor({"openat": boom})
        nid = channel.inject("openat")
        reply = channel.wait_reply(nid)
        assert reply.error == -errno.EPERM
        report = finish(sup, channel)
        assert any("handler bug" in e for e in report.handler_errors)

    def test_every_error_path_is_deny_never_allow(self):
        outcomes = []

        def weird(notif, state):
            raise ValueError("x")

        sup, channel, _ = make_supervisor({"openat": weird, "connect": weird})
        for syscall in ("openat", "connect"):
            nid = channel.inject(syscall)
            outcomes.append(channel.wait_reply(nid))
        finish(sup, channel)
        assert all(not r.continued and r.error < 0 for r in outcomes)


class TestExactlyOnce:
    def test_received_equals_replied_plus_stale(self):
        def handler(notif, state):
            return Verdict.allow()

        sup, channel, state = make_supervisor({"dup": handler})
        ids = [channel.inject("dup") for _ in range(20)]
        ids.append(channel.inject("dup", stale=True))
        for nid in ids:
            channel.wait_reply(nid)
        report = finish(sup, channel)
        stats = report.stats
        assert stats.received == 21
        assert stats.replied + stats.stale_dropped == stats.received
        assert stats.stale_dropped == 1

    def test_child_death_mid_handling_drops_reply(self):
        def read_then_allow(notif, state):
            state.channel.read_memory(notif, [(0x1000, 4)])
            return Verdict.emulate(0)

        sup, channel, state = make_supervisor({"connect": read_then_allow})
        channel.inject("connect", memory={0x1000: b"addr"},
                       stale_after_read=True)
        deadline = time.monotonic() + 5
        while state.stats.stale_dropped < 1 and time.monotonic() < deadline:
            time.sleep(0.01)
        report = finish(sup, channel)
        assert report.stats.stale_dropped == 1
        assert report.stats.replied == 0  # dropped silently, never answered


class TestSingleRead:
    def test_second_memory_pass_is_a_bug(self):
        failures = []

        def double_read(notif, state):
            state.channel.read_memory(notif, [(0x1000, 4)])
            try:
                state.channel.read_memory(notif, [(0x1000, 4)])
            except AssertionError as exc:
                failures.append(exc)
                raise
            return Verdict.allow()

        sup, channel, _ = make_supervisor({"connect": double_read})
        nid = channel.inject("connect", memory={0x1000: b"addr"})
        reply = channel.wait_reply(nid)
        assert failures, "second pass must trip the single-read instrumentation"
        assert reply.error == -errno.EPERM  # and it fails closed
        finish(sup, channel)

    def test_continue_after_memory_read_refused(self):
        def read_then_continue(notif, state):
            state.channel.read_memory(notif, [(0x1000, 4)])
            return Verdict.allow()

        sup, channel, _ = make_supervisor({"connect": read_then_continue})
        nid = channel.inject("connect", memory={0x1000: b"addr"})
        reply = channel.wait_reply(nid)
        assert not reply.continued and reply.error == -errno.EPERM

        def sanctioned(notif, state):
            state.channel.read_memory(notif, [(0x1000, 8)])
            notif.continue_after_read_ok = True  # freeze-held / clone3 case
            return Verdict.allow()

        sup2, channel2, _ = make_supervisor({"execve": sanctioned})
        nid2 = channel2.inject("execve", memory={0x1000: b"argvptr!"})
        reply2 = channel2.wait_reply(nid2)
        assert reply2.continued
        finish(sup, channel)
        finish(sup2, channel2)

    def test_validity_bracket_discards_on_replacement(self):
        observed = []

        def handler(notif, state):
            try:
                state.channel.read_memory(notif, [(0x2000, 4)])
                observed.append("read-ok")
            except StaleNotification:
                observed.append("stale")
                raise
            return Verdict.allow()

        sup, channel, state = make_supervisor({"connect": handler})
        channel.inject("connect", memory={0x2000: b"data"},
                       stale_after_read=True)
        deadline = time.monotonic() + 5
        while not observed and time.monotonic() < deadline:
            time.sleep(0.01)
        assert observed == ["stale"]
        finish(sup, channel)


class TestOrderingAndLiveness:
    def test_per_task_order_preserved_across_concurrency(self):
        order = {1: [], 2: []}
        gate = threading.Event()

        def handler(notif, state):
            if notif.pid == 1 and not order[1]:
                gate.wait(5)  # first task-1 notification stalls
            order[notif.pid].append(notif.args[0])
            return Verdict.allow()

        sup, channel, _ = make_supervisor({"openat": handler}, workers=4)
        ids = [channel.inject("openat", args=(i,), pid=1) for i in range(3)]
        other = [channel.inject("openat", args=(i,), pid=2) for i in range(3)]
        for nid in other:  # task 2 proceeds while task 1 is blocked
            channel.wait_reply(nid)
        assert order[2] == [0, 1, 2] and order[1] == []
        gate.set()
        for nid in ids:
            channel.wait_reply(nid)
        assert order[1] == [0, 1, 2]
        finish(sup, channel)

    def test_saturating_notifier_makes_progress(self):
        count = 200

        def handler(notif, state):
            return Verdict.allow()

        sup, channel, _ = make_supervisor({"dup": handler}, workers=2)
        t0 = time.monotonic()
        ids = [channel.inject("dup", pid=1000 + (i % 7)) for i in range(count)]
        for nid in ids:
            channel.wait_reply(nid)
        elapsed = time.monotonic() - t0
        report = finish(sup, channel)
        assert report.stats.replied == count
        assert elapsed < 10
