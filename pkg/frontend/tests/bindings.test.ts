import { describe, expect, it } from "vitest";

import {
  Context,
  Event,
  Pipeline,
  PolicyError,
  Sandbox,
} from "../src/index.js";

const BASE = ["/usr", "/lib", "/lib64", "/etc", "/bin"];
const ENFORCEMENT = { staticEnforcement: "supervised" as const };

describe("option mapping", () => {
  it("maps policy options onto CLI flags", () => {
    const sandbox = new Sandbox({
      fsReadable: ["/usr"],
      fsWritable: ["/tmp/w"],
      fsDeny: ["/usr/secret"],
      net: ["tcp:443"],
      http: ["GET example.com /api/*"],
      limits: { processes: 4, memory: "64M", cpu: 0.5, fds: 64 },
      cwd: "/tmp/w",
      ...ENFORCEMENT,
    });
    const flags = sandbox.flags();
    expect(flags).toContain("--ro");
    expect(flags).toContain("/usr");
    expect(flags).toContain("--rw");
    expect(flags).toContain("--deny");
    expect(flags.join(" ")).toContain("--net tcp:443");
    expect(flags.join(" ")).toContain("-P 4");
    expect(flags.join(" ")).toContain("-m 64M");
    expect(flags.join(" ")).toContain("--max-cpu 0.5");
    expect(flags.join(" ")).toContain("--static-enforcement supervised");
  });

  it("cmd requires an argv and pipe builds pipelines", () => {
    const sandbox = new Sandbox(ENFORCEMENT);
    expect(() => sandbox.cmd([])).toThrow();
    const pipeline = sandbox.cmd(["a"]).pipe(sandbox.cmd(["b"]));
    expect(pipeline).toBeInstanceOf(Pipeline);
    expect(pipeline.pipe(sandbox.cmd(["c"])).stages.length).toBe(3);
  });
});

describe("event and context contract", () => {
  it("argvContains matches substrings of any argument", () => {
    const event = new Event({
      id: 1,
      syscall: "execve",
      category: "exec",
      pid: 10,
      ppid: 9,
      argv: ["/usr/bin/curl", "http://x"],
    });
    expect(event.argvContains("curl")).toBe(true);
    expect(event.argvContains("wget")).toBe(false);
    expect(event.net).toBeNull();
  });

  it("events carry no path field by schema", () => {
    const event = new Event({
      id: 2,
      syscall: "openat",
      category: "file",
      pid: 1,
      ppid: 0,
    });
    expect((event as unknown as Record<string, unknown>).path).toBeUndefined();
    expect(Object.keys(event)).not.toContain("path");
  });

  it("context drains tightenings into the verdict reply", () => {
    const ctx = new Context();
    ctx.restrictNetwork([]);
    ctx.denyPath("/etc/shadow");
    ctx.tightenResources({ processes: 2 });
    expect(ctx.drain()).toEqual({
      restrict_network: [],
      deny_path: "/etc/shadow",
      tighten_resources: { max_processes: 2 },
    });
    expect(ctx.drain()).toEqual({});
  });
});

describe("validation through the external interface", () => {
  it("rejects wildcard hostnames as a native exception", async () => {
    const sandbox = new Sandbox({
      net: ["tcp:*.example.com:443"],
      ...ENFORCEMENT,
    });
    await expect(sandbox.validate()).rejects.toBeInstanceOf(PolicyError);
  });

  it("accepts a well-formed policy", async () => {
    const sandbox = new Sandbox({ fsReadable: BASE, ...ENFORCEMENT });
    await expect(sandbox.validate()).resolves.toBeUndefined();
  });
});

describe("running commands", () => {
  it("captures stdout and status of a benign command", async () => {
    const sandbox = new Sandbox({ fsReadable: BASE, ...ENFORCEMENT });
    const result = await sandbox.cmd(["/bin/echo", "bound"]).run();
    expect(result.exitCode).toBe(0);
    expect(result.stdoutText).toBe("bound\n");
  });

  it("single sandbox .cmd(['/bin/true']).run() reports status 0", async () => {
    const sandbox = new Sandbox({ fsReadable: BASE, ...ENFORCEMENT });
    const result = await sandbox.cmd(["/bin/true"]).run();
    expect(result.exitCode).toBe(0);
  });

  it("out-of-scope reads are denied", async () => {
    const sandbox = new Sandbox({ fsReadable: BASE, ...ENFORCEMENT });
    const result = await sandbox.cmd(["/bin/cat", "/opt/data/secret.csv"]).run();
    expect(result.exitCode).not.toBe(0);
  });
});

describe("verdict semantics parity", () => {
  const base = { fsReadable: BASE, ...ENFORCEMENT };

  it("returning true denies with EPERM", async () => {
    const sandbox = new Sandbox({ ...base, policyFn: () => true });
    const result = await sandbox.cmd(["/bin/echo", "never"]).run();
    expect(result.exitCode).toBe(127); // exec denied EPERM
  });

  it("returning 0 allows", async () => {
    const sandbox = new Sandbox({ ...base, policyFn: () => 0 });
    const result = await sandbox.cmd(["/bin/echo", "go"]).run();
    expect(result.exitCode).toBe(0);
    expect(result.stdoutText).toBe("go\n");
  });

  it("a positive integer denies with that errno", async () => {
    const sandbox = new Sandbox({ ...base, policyFn: () => 13 });
    const result = await sandbox.cmd(["/bin/echo", "never"]).run();
    expect(result.exitCode).toBe(127);
  });

  it("callback exceptions deny and never crash the supervisor", async () => {
    const sandbox = new Sandbox({
      ...base,
      policyFn: () => {
        throw new Error("bound callback bug");
      },
    });
    const result = await sandbox.cmd(["/bin/echo", "never"]).run();
    expect(result.exitCode).toBe(127);
  });

  it("audit allows and flags", async () => {
    const sandbox = new Sandbox({ ...base, policyFn: () => "audit" });
    const result = await sandbox.cmd(["/bin/echo", "seen"]).run();
    expect(result.exitCode).toBe(0);
    expect(result.stdoutText).toBe("seen\n");
    expect(result.audits.some((a) => a.flag === "audit")).toBe(true);
  });
});

describe("pipeline stdin", () => {
  it("feeds bytes into the first stage", async () => {
    const sandbox = new Sandbox({
      fsReadable: ["/usr", "/lib", "/lib64", "/etc", "/bin"],
      staticEnforcement: "supervised",
    });
    const result = await sandbox
      .cmd(["cat"])
      .pipe(sandbox.cmd(["tr", "a-z", "A-Z"]))
      .run("fed through bindings\n");
    expect(result.ok).toBe(true);
    expect(result.stdoutText).toBe("FED THROUGH BINDINGS\n");
  });
});
