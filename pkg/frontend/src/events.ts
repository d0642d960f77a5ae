/**
 * Event and verdict contract for policy callbacks.
 *
 * Field names and verdict semantics mirror the core's runtime-hook schema:
 * 0/false allows, true/-1 denies with EPERM, a positive integer denies with
 * that errno, "audit" allows and flags. Events never carry path strings.
 */

export interface NetDestination {
  protocol: string;
  ip: string;
  port: number | null;
}

export interface WireEvent {
  id: number;
  syscall: string;
  category: "exec" | "net" | "file";
  pid: number;
  ppid: number;
  argv?: string[];
  net?: NetDestination;
}

export class Event {
  readonly syscall: string;
  readonly category: "exec" | "net" | "file";
  readonly pid: number;
  readonly ppid: number;
  readonly argv: string[] | null;
  readonly net: NetDestination | null;

  constructor(wire: WireEvent) {
    this.syscall = wire.syscall;
    this.category = wire.category;
    this.pid = wire.pid;
    this.ppid = wire.ppid;
    this.argv = wire.argv ?? null;
    this.net = wire.net ?? null;
  }

  /** Substring match over the argument vector (observation, not a boundary). */
  argvContains(needle: string): boolean {
    return (this.argv ?? []).some((part) => part.includes(needle));
  }
}

export type Verdict = number | boolean | "audit" | null | undefined;

export interface ResourceTightening {
  processes?: number;
  memory?: number;
  cpu?: number;
  fds?: number;
}

/** Commands a callback may issue; every mutation only tightens. */
export interface PendingTightenings {
  restrict_network?: string[];
  deny_path?: string;
  tighten_resources?: Record<string, number>;
}

export class Context {
  private pending: PendingTightenings = {};

  /** Keep only the listed endpoints; an empty list revokes all egress. */
  restrictNetwork(endpoints: string[]): void {
    this.pending.restrict_network = endpoints;
  }

  denyPath(path: string): void {
    this.pending.deny_path = path;
  }

  tightenResources(limits: ResourceTightening): void {
    const wire: Record<string, number> = {};
    if (limits.processes !== undefined) wire.max_processes = limits.processes;
    if (limits.memory !== undefined) wire.max_memory = limits.memory;
    if (limits.cpu !== undefined) wire.max_cpu = limits.cpu;
    if (limits.fds !== undefined) wire.max_fds = limits.fds;
    this.pending.tighten_resources = wire;
  }

  /** @internal */
  drain(): PendingTightenings {
    const out = this.pending;
    this.pending = {};
    return out;
  }
}

export type PolicyFn = (event: Event, ctx: Context) => Verdict | Promise<Verdict>;
