/**
 * Process boundary to the native CLI.
 *
 * Errors never unwind across the boundary: a nonzero exit becomes a
 * `NativeError` carrying the exit code and the native error message from
 * stderr, verbatim.
 */

import { execFileSync } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

/** Exit codes used by the native CLI. */
export enum NativeExit {
  Ok = 0,
  Config = 2,
  Verification = 3,
}

export class NativeError extends Error {
  constructor(
    readonly exitCode: number,
    readonly nativeMessage: string,
    args: string[],
  ) {
    super(`bevkit ${args.join(" ")} exited ${exitCode}: ${nativeMessage}`);
    this.name = "NativeError";
  }
}

export interface RunnerOptions {
  /** CLI executable; defaults to $BEVKIT_BIN or "bevkit" on PATH. */
  binary?: string;
  timeoutMs?: number;
}

export class CliRunner {
  readonly binary: string;
  readonly timeoutMs: number;

  constructor(opts: RunnerOptions = {}) {
    this.binary = opts.binary ?? process.env.BEVKIT_BIN ?? "bevkit";
    this.timeoutMs = opts.timeoutMs ?? 600_000;
  }

  /** Run one CLI command; returns stdout. Throws NativeError on failure. */
  run(args: string[], okExitCodes: number[] = [0]): string {
    try {
      return execFileSync(this.binary, args, {
        encoding: "utf8",
        timeout: this.timeoutMs,
        stdio: ["ignore", "pipe", "pipe"],
      });
    } catch (err) {
      const e = err as { status?: number; stdout?: string; stderr?: string; message?: string };
      if (typeof e.status === "number") {
        if (okExitCodes.includes(e.status)) {
          return e.stdout ?? "";
        }
        const message = (e.stderr ?? "").trim() || `exit status ${e.status}`;
        throw new NativeError(e.status, message, args);
      }
      throw err;
    }
  }

  /** Run and parse the JSON document the command prints. */
  runJson<T>(args: string[], okExitCodes: number[] = [0]): T {
    return JSON.parse(this.run(args, okExitCodes)) as T;
  }
}

/** Scoped temp directory for staging files across the boundary. */
export function withWorkdir<T>(fn: (dir: string) => T): T {
  const dir = mkdtempSync(join(tmpdir(), "bevkit-"));
  try {
    return fn(dir);
  } finally {
    rmSync(dir, { recursive: true, force: true });
  }
}
