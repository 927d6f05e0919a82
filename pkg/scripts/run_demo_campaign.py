#!/usr/bin/env python3
"""Desk-scale demo: spawn the HTTP fixture, run a small campaign, render reports.

Needs root (or CAP_SYS_PTRACE). Writes everything to ./demo-campaign-out/.
"""

import os
import socket
import subprocess
import sys
import tempfile
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from syschaos.cli import has_tracing_privilege
from syschaos.orchestrator import CampaignConfig, plan_campaign, run_campaign
from syschaos.workload import RequestSpec, WorkloadSpec


def main() -> int:
    if not has_tracing_privilege():
        print("needs root or CAP_SYS_PTRACE", file=sys.stderr)
        return 1

    docroot = tempfile.mkdtemp(prefix="syschaos-demo-docroot-")
    with open(os.path.join(docroot, "index.html"), "w") as fh:
        fh.write("demo content\n")
    with open(os.path.join(docroot, "abc"), "w") as fh:
        fh.write("abc\n")

    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]

    server = subprocess.Popen(
        [sys.executable, "-m", "syschaos.fixtures.httpserver",
         "--port", str(port), "--docroot", docroot, "--tag", "fx-http-demo"],
        stdout=subprocess.PIPE, text=True)
    print("fixture:", server.stdout.readline().strip())

    out_dir = os.path.abspath("demo-campaign-out")
    config = CampaignConfig(
        target=f"pid:{server.pid}",
        syscalls=("open",),
        errors=("EACCES", "ENOENT"),
        delays_ms=(500,),
        phases={"before": 3.0, "during": 3.0, "after": 3.0},
        workload=WorkloadSpec(f"http://127.0.0.1:{port}", rate=20, duration=3,
                              requests=(RequestSpec(path="/"), RequestSpec(path="/abc"))),
        sample_interval_ms=500,
    )
    print(f"planned {len(plan_campaign(config))} experiments -> {out_dir}")
    started = time.time()
    result = run_campaign(config, out_dir=out_dir,
                          progress=lambda info: print(
                              " ".join(f"{k}={v}" for k, v in info.items())))
    print(f"done in {time.time() - started:.1f}s")
    for exp in result.flat():
        verdict = exp.report.verdict if exp.report else "error"
        print(f"  {exp.spec.describe():26s} -> {verdict}")
    print(f"open {out_dir}/index.html for charts and tables")
    server.terminate()
    server.wait()
    return 0


if __name__ == "__main__":
    sys.exit(main())
