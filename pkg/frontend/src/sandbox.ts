/**
 * Sandbox objects and pipeline composition.
 *
 * A Sandbox holds policy; .cmd(argv) makes a Stage; stages chain with
 * .pipe() (the pipeline operator) and a Pipeline .run()s every stage
 * concurrently, coupled only by kernel pipes. Results expose per-stage
 * status, captured stdout, and audit flags.
 */

import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { PolicyFn } from "./events.js";
import {
  AuditEntry,
  RunResult,
  SandboxError,
  runCli,
  validateCli,
} from "./runner.js";

export interface CowOptions {
  dir: string;
  storage?: string;
  onExit?: "commit" | "abort" | "keep";
  quota?: string | number;
  dryRun?: boolean;
}

export interface ResourceOptions {
  processes?: number;
  memory?: string | number;
  cpu?: number;
  fds?: number;
}

export interface SandboxOptions {
  fsReadable?: string[];
  fsWritable?: string[];
  fsDeny?: string[];
  /** Endpoint rules: "tcp:443" (port-only) or "proto:host:port". */
  net?: string[];
  /** HTTP rules: "METHOD HOST PATHGLOB". */
  http?: string[];
  limits?: ResourceOptions;
  cow?: CowOptions;
  cwd?: string;
  policyFn?: PolicyFn;
  /** Event categories the callback receives; default ["exec"]. */
  categories?: Array<"exec" | "net" | "file">;
  env?: Record<string, string>;
  auditLog?: string;
  /** "landlock" (default) or the explicit "supervised" fallback. */
  staticEnforcement?: "landlock" | "supervised";
}

function defaultEnforcement(): "landlock" | "supervised" {
  const env = process.env.SPLITBOX_STATIC_ENFORCEMENT;
  if (env === "supervised" || env === "landlock") return env;
  return "landlock";
}

export class Sandbox {
  readonly options: SandboxOptions;

  constructor(options: SandboxOptions = {}) {
    this.options = options;
  }

  /** Full policy validation through the CLI; PolicyError on bad specs. */
  async validate(): Promise<void> {
    await validateCli(["run", ...this.flags(), "--validate-only"]);
  }

  cmd(argv: string[]): Stage {
    if (!argv.length) throw new SandboxError("cmd needs an argv");
    return new Stage(this, argv);
  }

  /** @internal */
  flags(): string[] {
    const opts = this.options;
    const out: string[] = [];
    for (const path of opts.fsReadable ?? []) out.push("--ro", path);
    for (const path of opts.fsWritable ?? []) out.push("--rw", path);
    for (const path of opts.fsDeny ?? []) out.push("--deny", path);
    for (const rule of opts.net ?? []) out.push("--net", rule);
    for (const rule of opts.http ?? []) out.push("--http", rule);
    const limits = opts.limits ?? {};
    if (limits.processes !== undefined)
      out.push("-P", String(limits.processes));
    if (limits.memory !== undefined) out.push("-m", String(limits.memory));
    if (limits.cpu !== undefined) out.push("--max-cpu", String(limits.cpu));
    if (limits.fds !== undefined) out.push("--max-fds", String(limits.fds));
    if (opts.cow) {
      out.push("--cow", opts.cow.dir);
      if (opts.cow.storage) out.push("--cow-storage", opts.cow.storage);
      out.push("--on-exit", opts.cow.onExit ?? "abort");
      if (opts.cow.dryRun) out.push("--dry-run");
    }
    if (opts.cwd) out.push("--cwd", opts.cwd);
    if (opts.auditLog) out.push("--audit", opts.auditLog);
    if (opts.categories?.length)
      out.push("--hook-categories", opts.categories.join(","));
    for (const [name, value] of Object.entries(opts.env ?? {}))
      out.push("--env", `${name}=${value}`);
    out.push(
      "--static-enforcement",
      opts.staticEnforcement ?? defaultEnforcement(),
    );
    return out;
  }

  /** @internal policy-file document for pipeline stages */
  policyDoc(): Record<string, unknown> {
    const opts = this.options;
    const doc: Record<string, unknown> = {
      fs: {
        read: opts.fsReadable ?? [],
        write: opts.fsWritable ?? [],
        deny: opts.fsDeny ?? [],
      },
      net: { endpoints: opts.net ?? [], http: opts.http ?? [] },
    };
    const limits = opts.limits ?? {};
    doc.resources = {
      processes: limits.processes ?? null,
      memory: limits.memory ?? null,
      cpu: limits.cpu ?? null,
      fds: limits.fds ?? null,
    };
    if (opts.cwd) doc.cwd = opts.cwd;
    return doc;
  }
}

export interface StageResult {
  position: number;
  exitCode: number | null;
  termSignal: number | null;
  error: string | null;
  audits: AuditEntry[];
}

export interface PipelineRunResult {
  stdout: Buffer;
  stdoutText: string;
  stages: StageResult[];
  ok: boolean;
}

export interface SingleRunResult extends RunResult {
  stdoutText: string;
}

export class Stage {
  constructor(
    readonly sandbox: Sandbox,
    readonly argv: string[],
  ) {}

  /** The pipeline operator: this stage's stdout feeds the next's stdin. */
  pipe(next: Stage): Pipeline {
    return new Pipeline([this, next]);
  }

  async run(stdin?: Buffer | string): Promise<SingleRunResult> {
    const args = ["run", ...this.sandbox.flags(), "--", ...this.argv];
    const result = await runCli({
      args,
      stdin,
      policyFn: this.sandbox.options.policyFn,
    });
    return { ...result, stdoutText: result.stdout.toString() };
  }
}

function yamlQuote(value: string): string {
  return JSON.stringify(value); // JSON strings are valid YAML scalars
}

function stageYaml(stage: Stage): string {
  const doc = stage.sandbox.policyDoc() as {
    fs: { read: string[]; write: string[]; deny: string[] };
    net: { endpoints: string[]; http: string[] };
    resources: Record<string, unknown>;
    cwd?: string;
  };
  const lines: string[] = [];
  lines.push(`  - cmd: [${stage.argv.map(yamlQuote).join(", ")}]`);
  lines.push("    fs:");
  lines.push(`      read: [${doc.fs.read.map(yamlQuote).join(", ")}]`);
  lines.push(`      write: [${doc.fs.write.map(yamlQuote).join(", ")}]`);
  lines.push(`      deny: [${doc.fs.deny.map(yamlQuote).join(", ")}]`);
  lines.push("    net:");
  lines.push(
    `      endpoints: [${doc.net.endpoints.map(yamlQuote).join(", ")}]`,
  );
  lines.push(`      http: [${doc.net.http.map(yamlQuote).join(", ")}]`);
  const res = Object.entries(doc.resources).filter(([, v]) => v !== null);
  if (res.length) {
    lines.push(
      `    resources: {${res
        .map(([k, v]) => `${k}: ${typeof v === "string" ? yamlQuote(v) : v}`)
        .join(", ")}}`,
    );
  }
  if (doc.cwd) lines.push(`    cwd: ${yamlQuote(doc.cwd)}`);
  return lines.join("\n");
}

export class Pipeline {
  constructor(readonly stages: Stage[]) {
    if (!stages.length) throw new SandboxError("pipeline needs stages");
  }

  pipe(next: Stage): Pipeline {
    return new Pipeline([...this.stages, next]);
  }

  async run(stdin?: Buffer | string): Promise<PipelineRunResult> {
    if (this.stages.length === 1) {
      const single = await this.stages[0].run(stdin);
      return {
        stdout: single.stdout,
        stdoutText: single.stdoutText,
        stages: [
          {
            position: 0,
            exitCode: single.exitCode,
            termSignal: single.termSignal,
            error: null,
            audits: single.audits,
          },
        ],
        ok: single.exitCode === 0,
      };
    }
    const dir = mkdtempSync(join(tmpdir(), "splitbox-pipe-"));
    const file = join(dir, "pipeline.yaml");
    const body =
      "pipeline:\n" + this.stages.map((s) => stageYaml(s)).join("\n") + "\n";
    writeFileSync(file, body);
    try {
      const enforcement =
        this.stages[0].sandbox.options.staticEnforcement ??
        defaultEnforcement();
      const result = await runCli({
        args: ["pipeline", file, "--static-enforcement", enforcement],
        stdin,
      });
      const stages = parsePipelineReport(result, this.stages.length);
      return {
        stdout: result.stdout,
        stdoutText: result.stdout.toString(),
        stages,
        ok: stages.every((s) => s.exitCode === 0),
      };
    } finally {
      rmSync(dir, { recursive: true, force: true });
    }
  }
}

function parsePipelineReport(
  result: RunResult,
  count: number,
): StageResult[] {
  const reportStages = result.report.stages as
    | Array<Record<string, unknown>>
    | undefined;
  if (reportStages) {
    return reportStages.map((s) => ({
      position: s.position as number,
      exitCode: (s.exit_code as number | null) ?? null,
      termSignal: (s.term_signal as number | null) ?? null,
      error: (s.error as string | null) ?? null,
      audits: (s.audits as AuditEntry[]) ?? [],
    }));
  }
  // No structured report: synthesize from the exit code.
  return Array.from({ length: count }, (_, position) => ({
    position,
    exitCode: position === count - 1 ? result.exitCode : null,
    termSignal: null,
    error: null,
    audits: [],
  }));
}
