/**
 * Process plumbing: spawn the sandbox CLI, host the policy callback over the
 * JSONL event/verdict descriptor pair, collect the JSON result report.
 */

import { spawn } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import * as readline from "node:readline";
import { Writable, Readable } from "node:stream";

import { Context, Event, PolicyFn, WireEvent } from "./events.js";

export class SandboxError extends Error {}
export class PolicyError extends SandboxError {}
export class LaunchFailure extends SandboxError {}

export interface AuditEntry {
  event: Record<string, unknown>;
  flag: string;
}

export interface RunResult {
  exitCode: number;
  termSignal: number | null;
  stdout: Buffer;
  stderr: Buffer;
  audits: AuditEntry[];
  stats: Record<string, unknown>;
  effect: Record<string, unknown> | null;
  terminateReason: string | null;
  /** The raw JSON result report (pipeline reports carry a stages list). */
  report: Record<string, unknown>;
}

export interface SpawnSpec {
  args: string[];
  stdin?: Buffer | string;
  policyFn?: PolicyFn;
}

export function cliPath(): string {
  return process.env.SPLITBOX_CLI ?? "splitbox";
}

function attachPolicyFn(
  events: Readable,
  verdicts: Writable,
  policyFn: PolicyFn,
): void {
  const rl = readline.createInterface({ input: events });
  const ctx = new Context();
  let chain: Promise<void> = Promise.resolve();
  rl.on("line", (line) => {
    // Callbacks are serialized: one verdict in flight per sandbox.
    chain = chain.then(async () => {
      let wire: WireEvent;
      try {
        wire = JSON.parse(line) as WireEvent;
      } catch {
        return;
      }
      let verdict: unknown;
      try {
        verdict = await policyFn(new Event(wire), ctx);
      } catch {
        verdict = true; // exceptions deny (EPERM), never crash the supervisor
      }
      const reply: Record<string, unknown> = {
        id: wire.id,
        verdict: verdict ?? 0,
        ...ctx.drain(),
      };
      verdicts.write(JSON.stringify(reply) + "\n");
    });
  });
}

export async function runCli(spec: SpawnSpec): Promise<RunResult> {
  const reportDir = mkdtempSync(join(tmpdir(), "splitbox-bind-"));
  const reportPath = join(reportDir, "report.json");
  const args = [...spec.args];
  const runMode = args[0] === "run";
  if (runMode || args[0] === "pipeline") {
    args.splice(1, 0, "--report-json", reportPath);
  }

  const stdio: Array<"pipe" | "ignore"> = ["pipe", "pipe", "pipe"];
  if (spec.policyFn) {
    stdio.push("pipe", "pipe"); // fd 3: events out, fd 4: verdicts in
    if (runMode) {
      args.splice(1, 0, "--policy-events-fd", "3", "--policy-verdicts-fd", "4");
    }
  }

  const child = spawn(cliPath(), args, { stdio });
  if (spec.policyFn) {
    attachPolicyFn(
      child.stdio[3] as Readable,
      child.stdio[4] as Writable,
      spec.policyFn,
    );
  }

  const stdoutChunks: Buffer[] = [];
  const stderrChunks: Buffer[] = [];
  child.stdout!.on("data", (chunk: Buffer) => stdoutChunks.push(chunk));
  child.stderr!.on("data", (chunk: Buffer) => stderrChunks.push(chunk));
  if (spec.stdin !== undefined) {
    child.stdin!.end(spec.stdin);
  } else {
    child.stdin!.end();
  }

  const exitCode: number = await new Promise((resolve, reject) => {
    child.on("error", (err) => reject(new LaunchFailure(String(err))));
    child.on("close", (code, signal) =>
      resolve(code ?? (signal ? 128 : -1)),
    );
  });

  const stderr = Buffer.concat(stderrChunks);
  let report: Record<string, any> | null = null;
  try {
    report = JSON.parse(readFileSync(reportPath, "utf-8"));
  } catch {
    report = null;
  }
  rmSync(reportDir, { recursive: true, force: true });

  // Harness failures happen before any report is written; a child that
  // happens to exit with a harness-looking code still produces one.
  if (report === null) {
    if (exitCode === 123) {
      throw new PolicyError(stderr.toString().trim());
    }
    if (exitCode === 125 || exitCode === 122 || exitCode === 2) {
      throw new LaunchFailure(
        `sandbox harness failed (exit ${exitCode}): ` +
          stderr.toString().trim(),
      );
    }
    report = {};
  }

  return {
    exitCode,
    termSignal: (report.term_signal as number | null) ?? null,
    stdout: Buffer.concat(stdoutChunks),
    stderr,
    audits: (report.audits as AuditEntry[]) ?? [],
    stats: (report.stats as Record<string, unknown>) ?? {},
    effect: (report.effect as Record<string, unknown> | null) ?? null,
    terminateReason: (report.terminate_reason as string | null) ?? null,
    report,
  };
}

export async function validateCli(args: string[]): Promise<void> {
  const child = spawn(cliPath(), args, { stdio: ["ignore", "pipe", "pipe"] });
  const stderrChunks: Buffer[] = [];
  child.stderr!.on("data", (chunk: Buffer) => stderrChunks.push(chunk));
  const code: number = await new Promise((resolve, reject) => {
    child.on("error", (err) => reject(new LaunchFailure(String(err))));
    child.on("close", (c) => resolve(c ?? -1));
  });
  if (code !== 0) {
    throw new PolicyError(Buffer.concat(stderrChunks).toString().trim());
  }
}
