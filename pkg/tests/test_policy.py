"""Policy model: validation, pinning, compilation, and their invariants."""

import pytest
from hypothesis import given, strategies as st

from splitbox.policy import (Access, EndpointRule, HttpRule, PathPolicy,
                             PathRule, PinnedAllowlist, PolicyError, Protocol,
                             ResourceLimits, RuntimeHookConfig, SandboxSpec,
                             CowConfig, LAYER_STATIC_TCP, LAYER_SUPERVISOR,
                             compile_plan, pin_resolution, validate)


def plan_for(spec, resolver=None):
    norm = validate(spec)
    pins = pin_resolution(norm, resolver or (lambda host: ["127.0.0.1"]))
    return compile_plan(norm, pins)


class TestValidate:
    def test_http_rule_implies_endpoint(self):
        spec = SandboxSpec(http=(HttpRule("GET", "example.com", "/api/*"),))
        norm = validate(spec)
        assert EndpointRule(Protocol.TCP, "example.com", 80) in norm.endpoints

    def test_empty_spec_is_deny_all(self):
        norm = validate(SandboxSpec())
        assert norm.fs == () and norm.endpoints == () and norm.http == ()

    def test_wildcard_hostname_rejected(self):
        with pytest.raises(PolicyError):
            validate(SandboxSpec(
                endpoints=(EndpointRule(Protocol.TCP, "*.example.com", 443),)))

    def test_relative_path_rejected(self):
        with pytest.raises(PolicyError):
            PathRule("relative/path", Access.READ)

    def test_max_cpu_range(self):
        with pytest.raises(PolicyError):
            ResourceLimits(max_cpu=0.0)
        with pytest.raises(PolicyError):
            ResourceLimits(max_cpu=1.5)
        ResourceLimits(max_cpu=1.0)

    def test_paths_canonicalized(self):
        norm = validate(SandboxSpec(fs=(PathRule("/usr//lib/../lib", Access.READ),)))
        assert norm.fs[0].path == "/usr/lib"

    def test_deny_shadows_equal_grant(self):
        norm = validate(SandboxSpec(fs=(
            PathRule("/data", Access.READ), PathRule("/data", Access.DENY))))
        assert [r.access for r in norm.fs] == [Access.DENY]

    def test_https_ca_injection_rejected(self):
        with pytest.raises(PolicyError):
            validate(SandboxSpec(https_ca_injection=True))

    def test_port_only_invariants(self):
        with pytest.raises(PolicyError):
            EndpointRule(Protocol.UDP, None, 53, port_only=True)
        with pytest.raises(PolicyError):
            EndpointRule(Protocol.TCP, "host", 80, port_only=True)
        with pytest.raises(PolicyError):
            EndpointRule(Protocol.ICMP, "host", 1)


class TestPinning:
    def test_hostname_resolves_to_observed_set(self):
        norm = validate(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, "db.internal", 6379),)))
        pins = pin_resolution(norm, lambda h: ["10.1.2.3", "10.1.2.4"])
        assert pins.contains(Protocol.TCP, "10.1.2.3", 6379)
        assert pins.contains(Protocol.TCP, "10.1.2.4", 6379)
        assert pins.hostnames["10.1.2.3"] == "db.internal"

    def test_localhost_matches_system_resolver(self):
        import socket
        norm = validate(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, "localhost", 6379),)))
        pins = pin_resolution(norm)
        expected = {info[4][0] for info in
                    socket.getaddrinfo("localhost", None,
                                       proto=socket.IPPROTO_TCP)}
        assert {ip for (_, ip, _) in pins.entries} == expected

    def test_ip_literal_passes_through(self):
        norm = validate(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, "10.0.0.5", 443),)))
        pins = pin_resolution(norm, lambda h: pytest.fail("resolver called"))
        assert pins.contains(Protocol.TCP, "10.0.0.5", 443)

    def test_no_hostnames_empty_pin(self):
        norm = validate(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, None, 443, port_only=True),)))
        pins = pin_resolution(norm)
        assert pins.entries == frozenset()

    def test_unresolvable_fails_closed(self):
        def broken(host):
            raise OSError("no resolver")
        norm = validate(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, "gone.example", 80),)))
        with pytest.raises(PolicyError):
            pin_resolution(norm, broken)


class TestCompile:
    def test_port_only_stays_static(self):
        plan = plan_for(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, None, 443, port_only=True),)))
        assert plan.direct_network
        assert plan.static_tcp_ports == frozenset({443})
        assert not any(s in plan.supervisor_handlers
                       for s in ("connect", "sendto", "bind"))
        assert not plan.notify_syscalls

    def test_host_rule_routes_to_supervisor(self):
        plan = plan_for(SandboxSpec(
            endpoints=(EndpointRule(Protocol.TCP, "api.example.com", 443),)))
        assert not plan.direct_network
        for name in ("connect", "sendto", "sendmsg", "sendmmsg"):
            assert name in plan.notify_syscalls

    def test_cow_routes_fs_syscalls(self):
        plan = plan_for(SandboxSpec(cow=CowConfig(lower_root="/w")))
        for name in ("openat", "unlinkat", "mkdirat", "renameat2",
                     "getdents64"):
            assert plan.supervisor_handlers[name] == "cow_fs"

    def test_hook_adds_held_syscalls(self):
        plan = plan_for(SandboxSpec(runtime=RuntimeHookConfig(enabled=True)))
        for name in ("execve", "connect", "sendto", "sendmsg", "sendmmsg",
                     "bind", "openat"):
            assert name in plan.notify_syscalls

    def test_icmp_feature_gated(self):
        spec = SandboxSpec(endpoints=(EndpointRule(Protocol.ICMP, "10.0.0.1"),))
        with pytest.raises(PolicyError, match="feature-gated"):
            plan_for(spec)
        plan = plan_for(SandboxSpec(
            endpoints=(EndpointRule(Protocol.ICMP, "10.0.0.1"),),
            enable_icmp_emulation=True))
        assert not plan.direct_network

    def test_partition_every_rule_exactly_one_layer(self):
        spec = SandboxSpec(
            fs=(PathRule("/usr", Access.READ), PathRule("/tmp/w", Access.WRITE),
                PathRule("/usr/secret", Access.DENY)),
            endpoints=(EndpointRule(Protocol.TCP, "db.internal", 6379),
                       EndpointRule(Protocol.UDP, "10.0.0.53", 53)),
            http=(HttpRule("GET", "web.internal", "/x/*"),),
            resources=ResourceLimits(max_processes=4, max_memory=1 << 20,
                                     max_cpu=0.5, max_fds=64),
            runtime=RuntimeHookConfig(enabled=True),
            cow=CowConfig(lower_root="/tmp/w"),
        )
        plan = plan_for(spec)
        layers = plan.rule_layers
        # every tracked rule is claimed exactly once (dict => at most once;
        # check each spec surface appears)
        assert any(k.startswith("fs:read:/usr") for k in layers)
        assert any(k.startswith("net:udp") for k in layers)
        assert any(k.startswith("http:GET") for k in layers)
        assert any(k.startswith("res:max_processes") for k in layers)
        assert any(k.startswith("cow:") for k in layers)
        valid_layers = {"static_fs", "static_tcp_ports", "static_ipc",
                        "syscall_filter", "supervisor_handlers"}
        assert set(layers.values()) <= valid_layers

    def test_port_only_with_host_rules_goes_dynamic(self):
        plan = plan_for(SandboxSpec(endpoints=(
            EndpointRule(Protocol.TCP, None, 443, port_only=True),
            EndpointRule(Protocol.TCP, "db.internal", 6379))))
        assert not plan.direct_network
        assert plan.static_tcp_ports == frozenset()
        assert any(k.startswith("net:tcp:*:port") and v == LAYER_SUPERVISOR
                   for k, v in plan.rule_layers.items())

    def test_direct_claims_static_layer(self):
        plan = plan_for(SandboxSpec(endpoints=(
            EndpointRule(Protocol.TCP, None, 443, port_only=True),)))
        assert plan.rule_layers["net:tcp:*:port"] == LAYER_STATIC_TCP


class TestPathPolicy:
    def test_deny_wins_on_deeper_prefix(self):
        policy = PathPolicy([PathRule("/usr", Access.READ),
                             PathRule("/usr/secret", Access.DENY)])
        assert policy.allows_read("/usr/lib/libc.so")
        assert not policy.allows_read("/usr/secret/key")
        assert not policy.allows_read("/usr/secret")

    def test_write_implies_read(self):
        policy = PathPolicy([PathRule("/scratch", Access.WRITE)])
        assert policy.allows_read("/scratch/f")
        assert policy.allows_write("/scratch/f")
        assert not policy.allows_write("/scratchier")

    def test_default_deny(self):
        policy = PathPolicy([])
        assert not policy.allows_read("/anything")

    @given(st.lists(st.sampled_from(
        ["/a", "/a/b", "/a/b/c", "/d", "/d/e"]), max_size=5),
        st.sampled_from(["/a", "/a/b", "/a/b/c", "/d", "/d/e", "/x"]))
    def test_monotone_deny(self, grants, probe):
        """Adding a deny rule never enlarges the readable/writable set."""
        base = PathPolicy([PathRule(g, Access.WRITE) for g in grants])
        denied = base.with_denied("/a/b")
        if denied.allows_read(probe):
            assert base.allows_read(probe)
        if denied.allows_write(probe):
            assert base.allows_write(probe)


class TestResourceLimits:
    def test_subset_ordering(self):
        big = ResourceLimits(max_processes=8, max_memory=1 << 30)
        small = ResourceLimits(max_processes=4, max_memory=1 << 20,
                               max_cpu=0.5)
        assert small.is_subset_of(big)
        assert not big.is_subset_of(small)
        assert not ResourceLimits().is_subset_of(small)  # None is unlimited
