"""Command-line frontend: run one confined command, report kernel feature
support, or run a pipeline file.

Child stdio passes through untouched; harness diagnostics go to stderr only.
Exit codes: the child's code passes through (signals as 128+N); 2 for usage
errors, 123 for policy validation errors, 125 when the kernel floor is
unmet, 122 for other harness failures.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys

from .launcher import (DEFAULT_ENV_ALLOW, LaunchError, LaunchOptions,
                       check_kernel, launch)
from .pipeline import Stage, run_pipeline
from .policy import (EffectAction, PolicyError, SandboxSpec, compile_plan,
                     pin_resolution, validate)
from .policyfile import load_pipeline, load_policy, spec_from_dict

EXIT_USAGE = 2
EXIT_HARNESS = 122
EXIT_POLICY = 123
EXIT_FLOOR = 125


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitbox",
        description="Unprivileged process sandbox: static policy in kernel "
                    "rules, runtime decisions in a supervisor.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    run = sub.add_parser("run", help="run one confined command")
    run.add_argument("--ro", metavar="PATH", action="append", default=[],
                     help="grant read access beneath PATH")
    run.add_argument("--rw", metavar="PATH", action="append", default=[],
                     help="grant read+write access beneath PATH")
    run.add_argument("--deny", metavar="PATH", action="append", default=[],
                     help="deny access beneath PATH (wins over grants)")
    run.add_argument("--net", metavar="RULE", action="append", default=[],
                     help="allow endpoint: tcp:PORT, or PROTO:HOST:PORT")
    run.add_argument("--http", metavar="RULE", action="append", default=[],
                     help='allow HTTP: "METHOD HOST PATHGLOB"')
    run.add_argument("-P", "--max-processes", type=int, metavar="N")
    run.add_argument("-m", "--max-memory", metavar="SIZE",
                     help="address-space cap, K/M/G suffixes (base 1024)")
    run.add_argument("--max-cpu", type=float, metavar="F",
                     help="CPU share in (0,1], duty-cycle throttled")
    run.add_argument("--max-fds", type=int, metavar="N")
    run.add_argument("--cow", metavar="DIR",
                     help="copy-on-write workspace over DIR")
    run.add_argument("--cow-storage", metavar="DIR",
                     help="where the upper layer and manifest live")
    run.add_argument("--on-exit", choices=["commit", "abort", "keep"],
                     default="abort", help="what to do with captured effects")
    run.add_argument("--dry-run", action="store_true",
                     help="report the effect summary without applying it")
    run.add_argument("--cwd", metavar="DIR")
    run.add_argument("--policy", metavar="FILE",
                     help="policy file; explicit flags win over it")
    run.add_argument("--audit", metavar="FILE", help="JSONL audit log path")
    run.add_argument("--static-enforcement", choices=["landlock", "supervised"],
                     default=None,
                     help="how the static layer is enforced (default: "
                          "landlock; 'supervised' intercepts instead, for "
                          "kernels without Landlock - weaker, never implicit)")
    run.add_argument("--env", metavar="NAME=VALUE", action="append",
                     default=[], help="set a child environment variable")
    run.add_argument("--env-allow", metavar="NAME", action="append",
                     default=[], help="pass a host variable through")
    run.add_argument("--report-json", metavar="FILE",
                     help="write a machine-readable result report")
    run.add_argument("--validate-only", action="store_true",
                     help="validate the policy and exit without launching")
    run.add_argument("--policy-events-fd", type=int, metavar="FD",
                     help="emit held-syscall events as JSONL on FD")
    run.add_argument("--policy-verdicts-fd", type=int, metavar="FD",
                     help="read verdicts for held events from FD")
    run.add_argument("--hook-categories", metavar="LIST",
                     help="comma-separated event categories (exec,net,file)")
    run.add_argument("cmd", nargs=argparse.REMAINDER,
                     help="-- COMMAND [ARGS...]")

    sub.add_parser("check", help="report per-feature kernel support")

    pipe = sub.add_parser("pipeline", help="run a stage-list policy file")
    pipe.add_argument("file", help="pipeline policy file")
    pipe.add_argument("--report-json", metavar="FILE")
    pipe.add_argument("--static-enforcement",
                      choices=["landlock", "supervised"], default=None)
    return parser


def spec_from_args(args) -> SandboxSpec:
    doc = {
        "fs": {"read": args.ro, "write": args.rw, "deny": args.deny},
        "net": {"endpoints": args.net, "http": args.http},
        "resources": {
            "processes": args.max_processes,
            "memory": args.max_memory,
            "cpu": args.max_cpu,
            "fds": args.max_fds,
        },
        "cwd": args.cwd,
    }
    if args.cow:
        doc["cow"] = {"dir": args.cow, "storage": args.cow_storage,
                      "on_exit": args.on_exit}
    if args.policy_events_fd is not None:
        doc["runtime"] = {
            "hook": True,
            "categories": (args.hook_categories.split(",")
                           if args.hook_categories else ["exec"]),
        }
    spec = spec_from_dict(doc)
    if args.policy:
        base = load_policy(args.policy)
        spec = _merge_specs(base, spec, args)
    return spec


def _merge_specs(base: SandboxSpec, flags: SandboxSpec, args) -> SandboxSpec:
    from dataclasses import replace
    merged = replace(
        base,
        fs=base.fs + flags.fs,
        endpoints=base.endpoints + flags.endpoints,
        http=base.http + flags.http,
    )
    if args.cow:
        merged = replace(merged, cow=flags.cow)
    if any(v is not None for v in (args.max_processes, args.max_memory,
                                   args.max_cpu, args.max_fds)):
        merged = replace(merged, resources=flags.resources)
    if args.cwd:
        merged = replace(merged, cwd=flags.cwd)
    if flags.runtime.enabled:
        merged = replace(merged, runtime=flags.runtime)
    return merged


def _default_enforcement(requested: str | None) -> str:
    if requested:
        return requested
    return "landlock"


def _split_cmd(remainder: list[str]) -> list[str]:
    cmd = list(remainder)
    if cmd and cmd[0] == "--":
        cmd = cmd[1:]
    return cmd


def cmd_run(args) -> int:
    cmd = _split_cmd(args.cmd)
    if not cmd and not args.validate_only:
        print("splitbox run: missing target command after --", file=sys.stderr)
        return EXIT_USAGE
    try:
        spec = spec_from_args(args)
        norm = validate(spec)
        if args.validate_only:
            return 0
        plan = compile_plan(norm, pin_resolution(norm))
    except PolicyError as exc:
        print(f"splitbox: policy error: {exc}", file=sys.stderr)
        return EXIT_POLICY

    callback = None
    if args.policy_events_fd is not None:
        if args.policy_verdicts_fd is None:
            print("splitbox: --policy-events-fd needs --policy-verdicts-fd",
                  file=sys.stderr)
            return EXIT_USAGE
        from .wireproto import WireCallback
        callback = WireCallback(args.policy_events_fd,
                                args.policy_verdicts_fd)

    options = LaunchOptions(
        static_enforcement=_default_enforcement(args.static_enforcement),
        audit_path=args.audit,
        policy_callback=callback,
        env_set=tuple(tuple(e.split("=", 1)) for e in args.env if "=" in e),
        env_allow=DEFAULT_ENV_ALLOW + tuple(args.env_allow),
    )
    try:
        handle = launch(plan, cmd, options)
    except LaunchError as exc:
        print(f"splitbox: {exc}", file=sys.stderr)
        return EXIT_FLOOR if "floor" in str(exc) else EXIT_HARNESS

    _forward_signals(handle)
    result = handle.wait()

    effect = None
    if spec.cow is not None:
        action = EffectAction(args.on_exit)
        summary = handle.finalize(action, dry_run=args.dry_run)
        if summary is not None:
            effect = summary.to_dict()
            if action is EffectAction.KEEP and not args.dry_run:
                kept_at = handle.workspace.layers().storage_dir
                effect["kept_at"] = kept_at
                print(f"splitbox: workspace kept at {kept_at}",
                      file=sys.stderr)
            if args.dry_run:
                print(json.dumps({"effect": effect}, indent=2),
                      file=sys.stderr)

    if args.report_json:
        report = {
            "exit_code": result.exit_code,
            "term_signal": result.term_signal,
            "duration": result.duration,
            "stats": result.stats,
            "audits": result.audits,
            "effect": effect,
            "terminate_reason": result.terminate_reason,
        }
        with open(args.report_json, "w") as f:
            json.dump(report, f, indent=2)

    if result.terminate_reason:
        print(f"splitbox: {result.terminate_reason}", file=sys.stderr)
    return result.exit_code


def _forward_signals(handle) -> None:
    def forward(signum, frame):
        handle.kill(signum)

    signal.signal(signal.SIGINT, forward)
    signal.signal(signal.SIGTERM, forward)


def cmd_check(args) -> int:
    report = check_kernel()
    for line in report.lines():
        print(line)
    return 0


def cmd_pipeline(args) -> int:
    try:
        stages_cfg = load_pipeline(args.file)
    except (PolicyError, OSError) as exc:
        print(f"splitbox: {exc}", file=sys.stderr)
        return EXIT_POLICY
    options = LaunchOptions(
        static_enforcement=_default_enforcement(args.static_enforcement))
    stages = [Stage(spec, cmd, options, position=i)
              for i, (spec, cmd) in enumerate(stages_cfg)]
    try:
        result = run_pipeline(stages, stdin="inherit")
    except (LaunchError, PolicyError) as exc:
        print(f"splitbox: {exc}", file=sys.stderr)
        return EXIT_HARNESS
    sys.stdout.buffer.write(result.stdout)
    sys.stdout.buffer.flush()
    if args.report_json:
        report = {
            "stages": [{"position": s.position, "exit_code": s.exit_code,
                        "term_signal": s.term_signal, "error": s.error,
                        "audits": s.audits}
                       for s in result.stages],
        }
        with open(args.report_json, "w") as f:
            json.dump(report, f, indent=2)
    for stage in result.stages:
        if stage.exit_code not in (0, None):
            return stage.exit_code
        if stage.exit_code is None:
            return EXIT_HARNESS
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    if args.subcommand == "run":
        return cmd_run(args)
    if args.subcommand == "check":
        return cmd_check(args)
    return cmd_pipeline(args)


if __name__ == "__main__":
    sys.exit(main())
