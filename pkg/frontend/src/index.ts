export { Event, Context } from "./events.js";
export type {
  NetDestination,
  PolicyFn,
  ResourceTightening,
  Verdict,
  WireEvent,
} from "./events.js";
export {
  Pipeline,
  Sandbox,
  Stage,
} from "./sandbox.js";
export type {
  CowOptions,
  PipelineRunResult,
  ResourceOptions,
  SandboxOptions,
  SingleRunResult,
  StageResult,
} from "./sandbox.js";
export { LaunchFailure, PolicyError, SandboxError, cliPath } from "./runner.js";
export type { AuditEntry, RunResult } from "./runner.js";
