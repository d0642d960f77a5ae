"""Declarative policy files (YAML, one document per sandbox) and their
flag-for-flag equivalence with the CLI. A pipeline file is the same shape
nested under an ordered stage list.

Example:

    fs:
      read: [/usr, /lib]
      write: [/tmp/scratch]
      deny: [/usr/local/secret]
    cow:
      dir: /work/tree          # the protected lower tree
      storage: /work/ws        # upper + manifest (temp dir if omitted)
      on_exit: abort           # commit | abort | keep
      quota: 64M
    net:
      endpoints: ["tcp:443", "tcp:example.com:443", "udp:127.0.0.1:53"]
      http: ["GET example.com /api/*"]
    resources: {processes: 4, memory: 64M, cpu: 0.5, fds: 256}
    runtime: {hook: true, categories: [exec, file]}
    cwd: /work/tree
"""

from __future__ import annotations

import yaml

from .policy import (Access, CowConfig, EffectAction, EndpointRule, HttpRule,
                     PathRule, PolicyError, Protocol, ResourceLimits,
                     RuntimeHookConfig, SandboxSpec)


def parse_size(text) -> int:
    """Sizes with K/M/G suffixes, base 1024."""
    if isinstance(text, int):
        return text
    t = str(text).strip()
    mult = 1
    if t and t[-1].upper() in "KMG":
        mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}[t[-1].upper()]
        t = t[:-1]
    try:
        return int(t) * mult
    except ValueError as exc:
        raise PolicyError(f"bad size {text!r}") from exc


def parse_endpoint(text: str) -> EndpointRule:
    """"tcp:PORT" (port-only), "PROTO:HOST:PORT", or "icmp:HOST"."""
    parts = str(text).split(":")
    if len(parts) == 2 and parts[0] == "tcp" and parts[1].isdigit():
        return EndpointRule(Protocol.TCP, None, int(parts[1]), port_only=True)
    if len(parts) == 2 and parts[0] == "icmp":
        return EndpointRule(Protocol.ICMP, parts[1])
    if len(parts) >= 3:
        proto = Protocol(parts[0])
        port = int(parts[-1])
        host = ":".join(parts[1:-1])  # IPv6 literals keep their colons
        return EndpointRule(proto, host, port)
    raise PolicyError(f"cannot parse endpoint rule {text!r}")


def parse_http_rule(text: str) -> HttpRule:
    """"METHOD HOST PATHGLOB", host may carry :port (default 80)."""
    parts = str(text).split()
    if len(parts) != 3:
        raise PolicyError(f"http rule needs 'METHOD HOST PATHGLOB': {text!r}")
    method, host, pattern = parts
    port = 80
    if ":" in host:
        host, port_text = host.rsplit(":", 1)
        port = int(port_text)
    return HttpRule(method, host, pattern, port)


def spec_from_dict(doc: dict) -> SandboxSpec:
    if not isinstance(doc, dict):
        raise PolicyError("policy document must be a mapping")
    fs = []
    fs_doc = doc.get("fs") or {}
    for path in fs_doc.get("read", []) or []:
        fs.append(PathRule(str(path), Access.READ))
    for path in fs_doc.get("write", []) or []:
        fs.append(PathRule(str(path), Access.WRITE))
    for path in fs_doc.get("deny", []) or []:
        fs.append(PathRule(str(path), Access.DENY))

    cow = None
    cow_doc = doc.get("cow")
    if cow_doc:
        cow = CowConfig(
            lower_root=str(cow_doc["dir"]),
            workspace_dir=(str(cow_doc["storage"])
                           if cow_doc.get("storage") else None),
            on_exit=EffectAction(str(cow_doc.get("on_exit", "abort")).lower()),
            quota_bytes=(parse_size(cow_doc["quota"])
                         if cow_doc.get("quota") else None),
        )

    net_doc = doc.get("net") or {}
    endpoints = tuple(parse_endpoint(e) for e in net_doc.get("endpoints", []) or [])
    http = tuple(parse_http_rule(h) for h in net_doc.get("http", []) or [])

    res_doc = doc.get("resources") or {}
    resources = ResourceLimits(
        max_processes=res_doc.get("processes"),
        max_memory=(parse_size(res_doc["memory"])
                    if res_doc.get("memory") is not None else None),
        max_cpu=res_doc.get("cpu"),
        max_fds=res_doc.get("fds"),
    )

    rt_doc = doc.get("runtime") or {}
    runtime = RuntimeHookConfig(
        enabled=bool(rt_doc.get("hook", False)),
        categories=frozenset(rt_doc.get("categories", ["exec"])),
        hold_timeout=rt_doc.get("hold_timeout"),
        freeze_disabled=bool(rt_doc.get("freeze_disabled", False)),
    )

    return SandboxSpec(
        fs=tuple(fs),
        cow=cow,
        endpoints=endpoints,
        http=http,
        resources=resources,
        runtime=runtime,
        cwd=doc.get("cwd"),
        https_ca_injection=bool(doc.get("https_ca_injection", False)),
        enable_icmp_emulation=bool(doc.get("enable_icmp_emulation", False)),
    )


def load_policy(path: str) -> SandboxSpec:
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    return spec_from_dict(doc)


def load_pipeline(path: str) -> list[tuple[SandboxSpec, list[str]]]:
    """Stage list: [{cmd: [...], <policy keys>}, ...] under `pipeline:`."""
    with open(path) as f:
        doc = yaml.safe_load(f) or {}
    stages_doc = doc.get("pipeline")
    if not isinstance(stages_doc, list) or not stages_doc:
        raise PolicyError("pipeline file needs a non-empty `pipeline:` list")
    stages = []
    for entry in stages_doc:
        if "cmd" not in entry or not isinstance(entry["cmd"], list):
            raise PolicyError("each pipeline stage needs a `cmd` list")
        policy = {k: v for k, v in entry.items() if k != "cmd"}
        stages.append((spec_from_dict(policy), [str(a) for a in entry["cmd"]]))
    return stages
