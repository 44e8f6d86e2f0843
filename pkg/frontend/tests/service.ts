/** Spawns the review service with the packaged demo fixture for live tests. */

import { ChildProcess, spawn } from "node:child_process";

const SERVICE_SCRIPT = `
import sys, tempfile
import uvicorn
from emofuse.corpus import read_manifest
from emofuse.curation import run_curation
from emofuse.fixtures import build_demo_registry, demo_clips, demo_config, demo_decoder
from emofuse.review_service import ReviewStore, create_app

out = tempfile.mkdtemp()
run_curation(demo_clips(), build_demo_registry(), demo_config(), out, decoder=demo_decoder())
manifest = read_manifest(out + "/sre.jsonl")
store = ReviewStore({r.clip_id: r for r in manifest.records})
uvicorn.run(create_app(store), host="127.0.0.1", port=int(sys.argv[1]), log_level="warning")
`;

export interface LiveService {
  base: string;
  stop: () => void;
}

async function waitReady(base: string, child: ChildProcess, stderr: string[]): Promise<void> {
  const deadline = Date.now() + 60_000;
  while (Date.now() < deadline) {
    if (child.exitCode !== null) {
      throw new Error(`review service exited early:\n${stderr.join("")}`);
    }
    try {
      const response = await fetch(`${base}/api/queue/stats`);
      if (response.ok) {
        return;
      }
    } catch {
      // not listening yet
    }
    await new Promise((resolve) => setTimeout(resolve, 250));
  }
  throw new Error(`review service never became ready:\n${stderr.join("")}`);
}

export async function startService(): Promise<LiveService> {
  const port = 18000 + Math.floor(Math.random() * 2000);
  const base = `http://127.0.0.1:${port}`;
  const child = spawn("python3", ["-c", SERVICE_SCRIPT, String(port)], {
    stdio: ["ignore", "ignore", "pipe"],
  });
  const stderr: string[] = [];
  child.stderr?.on("data", (chunk: Buffer) => stderr.push(chunk.toString()));
  try {
    await waitReady(base, child, stderr);
  } catch (error) {
    child.kill();
    throw error;
  }
  return {
    base,
    stop: () => {
      child.kill();
    },
  };
}
