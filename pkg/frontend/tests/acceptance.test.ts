/**
 * The two canonical usage programs, run through the bindings:
 *  - a policy callback that audits curl execs, revokes network, and tightens
 *    filesystem scope, with "audit" flags surfacing in the result;
 *  - the trusted-cat | restricted-tr pipeline where the restricted stage's
 *    own read of /opt/data is denied while the piped bytes flow.
 */

import { createServer, Server, Socket } from "node:net";
import { existsSync, mkdirSync, writeFileSync } from "node:fs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { Event, Context, Sandbox } from "../src/index.js";

const BASE = ["/usr", "/lib", "/lib64", "/etc", "/bin"];
const ENFORCEMENT = { staticEnforcement: "supervised" as const };

beforeAll(() => {
  if (!existsSync("/opt/data")) {
    mkdirSync("/opt/data", { recursive: true });
  }
  writeFileSync("/opt/data/secret.csv", "shhh,classified\n");
});

describe("programmable policy callback", () => {
  it("curl exec produces an audit flag", async () => {
    function onEvent(event: Event, ctx: Context) {
      if (event.syscall === "execve") {
        // argv is an observation signal, not a boundary
        if (event.argvContains("curl")) {
          return "audit"; // flag; name matching is evadable
        }
        ctx.restrictNetwork([]); // real control: revoke network
        ctx.denyPath("/etc/shadow"); //   and tighten fs scope
      }
      if (event.category === "file") {
        return "audit"; // allow + flag
      }
      return 0; // allow
    }

    const sandbox = new Sandbox({
      fsReadable: BASE,
      policyFn: onEvent,
      ...ENFORCEMENT,
    });
    const result = await sandbox
      .cmd(["curl", "--version"])
      .run();
    expect(result.exitCode).toBe(0);
    expect(result.stdoutText.toLowerCase()).toContain("curl");
    expect(result.audits.some((a) => a.flag === "audit")).toBe(true);
  });

  it("restrict_network([]) causes subsequent connect denial", async () => {
    const accepted: Socket[] = [];
    const server: Server = createServer((conn) => {
      accepted.push(conn);
      conn.on("data", (d) => conn.write(d));
    });
    await new Promise<void>((resolve) =>
      server.listen(0, "127.0.0.1", resolve),
    );
    const port = (server.address() as { port: number }).port;

    let revoked = false;
    function onEvent(event: Event, ctx: Context) {
      if (event.category === "net" && !revoked) {
        revoked = true;
        ctx.restrictNetwork([]); // real control: revoke network
      }
      return 0;
    }

    const probe = [
      "import socket, sys",
      "s = socket.socket()",
      `s.connect(('127.0.0.1', ${port}))`,
      "s.sendall(b'one'); s.recv(8); s.close()",
      "try:",
      `    s2 = socket.socket(); s2.connect(('127.0.0.1', ${port}))`,
      "    sys.exit(2)",
      "except OSError:",
      "    sys.exit(0)",
    ].join("\n");

    const sandbox = new Sandbox({
      fsReadable: BASE,
      net: [`tcp:127.0.0.1:${port}`],
      policyFn: onEvent,
      categories: ["exec", "net"],
      ...ENFORCEMENT,
    });
    const result = await sandbox.cmd(["python3", "-c", probe]).run();
    server.close();
    expect(result.exitCode).toBe(0);
    expect(accepted.length).toBe(1); // only the pre-revocation connect landed
  });
});

describe("pipeline of heterogeneous sandboxes", () => {
  it("cat | tr yields the uppercased file", async () => {
    const trusted = new Sandbox({
      fsReadable: ["/usr", "/lib", "/opt/data"],
      ...ENFORCEMENT,
    });
    const restricted = new Sandbox({
      fsReadable: ["/usr", "/lib"], // no /opt/data
      ...ENFORCEMENT,
    });
    const result = await trusted
      .cmd(["cat", "/opt/data/secret.csv"])
      .pipe(restricted.cmd(["tr", "a-z", "A-Z"]))
      .run();
    expect(result.ok).toBe(true);
    expect(result.stdoutText).toBe("SHHH,CLASSIFIED\n");
    expect(result.stages.map((s) => s.exitCode)).toEqual([0, 0]);
  });

  it("the restricted stage cannot read /opt/data itself", async () => {
    const restricted = new Sandbox({
      fsReadable: ["/usr", "/lib"],
      ...ENFORCEMENT,
    });
    const result = await restricted
      .cmd(["cat", "/opt/data/secret.csv"])
      .run();
    expect(result.exitCode).not.toBe(0);
    expect(result.stdoutText).not.toContain("classified");
  });

  it("statuses are reported for every stage when one fails", async () => {
    const sandbox = new Sandbox({ fsReadable: BASE, ...ENFORCEMENT });
    const result = await sandbox
      .cmd(["/bin/echo", "x"])
      .pipe(sandbox.cmd(["/bin/sh", "-c", "exit 3"]))
      .pipe(sandbox.cmd(["/bin/cat"]))
      .run();
    expect(result.stages.map((s) => s.exitCode)).toEqual([0, 3, 0]);
    expect(result.ok).toBe(false);
  });
});
