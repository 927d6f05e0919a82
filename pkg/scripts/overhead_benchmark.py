#!/usr/bin/env python3
"""Measure tool overhead: monitor-only CPU cost and tracer slowdown on the copier.

Writes benchmark-report.json to the working directory. Needs root or
CAP_SYS_PTRACE for the tracer half.
"""

import json
import os
import resource
import subprocess
import sys
import tempfile
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import signal

from syschaos.cli import has_tracing_privilege
from syschaos.monitor import TargetHandle, start_sampling
from syschaos.store import MetricsStore
from syschaos.tracer import attach


def monitor_overhead(duration_s: float = 8.0) -> float:
    target = subprocess.Popen([sys.executable, "-c", "import time; time.sleep(60)"])
    try:
        time.sleep(0.2)
        store = MetricsStore()
        before = resource.getrusage(resource.RUSAGE_SELF)
        wall0 = time.monotonic()
        handle = start_sampling(TargetHandle(target.pid), 1000, store)
        time.sleep(duration_s)
        handle.stop()
        after = resource.getrusage(resource.RUSAGE_SELF)
        wall = time.monotonic() - wall0
    finally:
        target.kill()
        target.wait()
    cpu = (after.ru_utime - before.ru_utime) + (after.ru_stime - before.ru_stime)
    return 100.0 * cpu / wall


def copier_wall(ops: int, traced: bool) -> float:
    done = tempfile.mktemp(prefix="syschaos-bench-done-")
    proc = subprocess.Popen(
        [sys.executable, "-m", "syschaos.fixtures.copier", "--count", str(ops),
         "--handshake", "--done-file", done],
        stdout=subprocess.PIPE, text=True)
    proc.stdout.readline()
    session = attach(proc.pid, record_events=False) if traced else None
    start = time.monotonic()
    proc.send_signal(signal.SIGUSR1)
    while not os.path.exists(done):
        time.sleep(0.003)
    elapsed = time.monotonic() - start
    proc.send_signal(signal.SIGUSR2)
    proc.communicate()
    if session is not None:
        session.wait(15)
    os.unlink(done)
    return elapsed


def main() -> int:
    report = {"monitor_cpu_pct_of_core": round(monitor_overhead(), 3)}
    print(f"monitor-only sampling: {report['monitor_cpu_pct_of_core']}% of one core")
    if has_tracing_privilege():
        ops = 5000
        untraced = copier_wall(ops, traced=False)
        traced = copier_wall(ops, traced=True)
        report.update(
            copier_ops=2 * ops,
            untraced_wall_s=round(untraced, 4),
            traced_wall_s=round(traced, 4),
            tracer_slowdown_ratio=round(traced / untraced, 2),
        )
        print(f"copier {2 * ops} syscalls: untraced {untraced:.3f}s, "
              f"traced {traced:.3f}s, slowdown x{report['tracer_slowdown_ratio']}")
    else:
        print("skipping tracer benchmark (no ptrace privilege)", file=sys.stderr)
    with open("benchmark-report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    print("wrote benchmark-report.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
