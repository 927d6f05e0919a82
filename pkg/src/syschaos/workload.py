"""Repeatable workload generation and application-level outcome recording.

The HTTP driver is open-loop: request send times are fixed up front from
the target rate, so a server that slows down or stalls shows up as rising
latency and eventually status-0 outcomes instead of silently reducing the
offered load. In-flight requests are bounded (default 64); a scheduled
request past the bound queues and its latency is measured from its actual
send. Connection failures and timeouts are data, not errors: they record
status 0, and the per-request timeout (10 s) is far above the largest
delay we ever inject so the two remain distinguishable.

The driver doubles as the application-level monitor: every outcome is
appended to the metrics store as an ``http.status.<code>`` count sample
plus an ``http.latency_ms`` sample.
"""

from __future__ import annotations

import json
import subprocess
import sys
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .store import MetricSample, MetricsStore, SeriesKey

REQUEST_TIMEOUT_S = 10.0
MAX_IN_FLIGHT = 64


@dataclass(frozen=True)
class RequestSpec:
    method: str = "GET"
    path: str = "/"
    body: bytes | None = None


@dataclass(frozen=True)
class WorkloadSpec:
    base_url: str
    rate: float  # requests per second
    duration: float  # seconds
    requests: tuple[RequestSpec, ...] = (RequestSpec(),)

    def __post_init__(self):
        if self.rate <= 0 or self.duration <= 0 or not self.requests:
            raise ValueError("rate > 0, duration > 0 and at least one request are required")

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        reqs = tuple(
            RequestSpec(
                method=r.get("method", "GET"),
                path=r.get("path", "/"),
                body=r["body"].encode() if r.get("body") is not None else None,
            )
            for r in data.get("requests", [{}])
        )
        return cls(base_url=data["base_url"], rate=float(data["rate"]),
                   duration=float(data["duration"]), requests=reqs or (RequestSpec(),))


@dataclass(frozen=True)
class RequestOutcome:
    timestamp: int  # monotonic ns at completion
    status: int  # HTTP code; 0 = connection failure or timeout
    latency_ms: float


@dataclass
class WorkloadSummary:
    count: int
    status_histogram: dict[int, int]
    p50_ms: float | None
    p95_ms: float | None
    p99_ms: float | None
    outcomes: list[RequestOutcome] = field(repr=False, default_factory=list)


def _percentile(sorted_values: list[float], q: float) -> float | None:
    if not sorted_values:
        return None
    idx = max(0, min(len(sorted_values) - 1, int(q / 100.0 * len(sorted_values) + 0.5) - 1))
    return sorted_values[idx]


class _StoreSink:
    """Serializes appends per series and nudges timestamps to stay increasing."""

    def __init__(self, store: MetricsStore, labels: dict[str, str] | None):
        self.store = store
        self.labels = labels or {}
        self.lock = threading.Lock()
        self.last_ts: dict[str, int] = {}

    def add(self, series: str, ts: int, value: float) -> None:
        with self.lock:
            ts = max(ts, self.last_ts.get(series, 0) + 1)
            self.last_ts[series] = ts
            self.store.append(SeriesKey(series, self.labels), MetricSample(ts, value))


def _issue(base_url: str, req: RequestSpec) -> tuple[int, float]:
    request = urllib.request.Request(base_url.rstrip("/") + req.path,
                                     data=req.body, method=req.method)
    start = time.monotonic_ns()
    try:
        with urllib.request.urlopen(request, timeout=REQUEST_TIMEOUT_S) as resp:
            resp.read()
            status = resp.status
    except urllib.error.HTTPError as exc:  # a real response with a non-2xx code
        exc.read()
        status = exc.code
    except Exception:
        status = 0
    latency_ms = (time.monotonic_ns() - start) / 1e6
    return status, latency_ms


def run_workload(spec: WorkloadSpec, store: MetricsStore | None = None,
                 labels: dict[str, str] | None = None) -> WorkloadSummary:
    """Drive the workload for its duration and summarize the outcomes."""
    sink = _StoreSink(store, labels) if store is not None else None
    outcomes: list[RequestOutcome] = []
    outcomes_lock = threading.Lock()

    def task(req: RequestSpec):
        status, latency_ms = _issue(spec.base_url, req)
        now = time.monotonic_ns()
        outcome = RequestOutcome(now, status, latency_ms)
        with outcomes_lock:
            outcomes.append(outcome)
        if sink is not None:
            sink.add(f"http.status.{status}", now, 1.0)
            sink.add("http.latency_ms", now, latency_ms)

    total = int(spec.rate * spec.duration)
    interval = 1.0 / spec.rate
    start = time.monotonic()
    with ThreadPoolExecutor(max_workers=min(MAX_IN_FLIGHT, max(total, 1))) as pool:
        for i in range(total):
            scheduled = start + i * interval
            delay = scheduled - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            pool.submit(task, spec.requests[i % len(spec.requests)])

    histogram: dict[int, int] = {}
    for outcome in outcomes:
        histogram[outcome.status] = histogram.get(outcome.status, 0) + 1
    latencies = sorted(o.latency_ms for o in outcomes)
    return WorkloadSummary(
        count=len(outcomes),
        status_histogram=histogram,
        p50_ms=_percentile(latencies, 50),
        p95_ms=_percentile(latencies, 95),
        p99_ms=_percentile(latencies, 99),
        outcomes=outcomes,
    )


# -- command workloads (registered fixtures only, no arbitrary shell) ----

@dataclass(frozen=True)
class FixtureCommand:
    """A registered fixture invocation, e.g. name="copier", args={"count": 1000}."""

    name: str
    args: tuple[tuple[str, object], ...] = ()

    @classmethod
    def from_dict(cls, data: dict) -> "FixtureCommand":
        return cls(data["name"], tuple(sorted(dict(data.get("args", {})).items())))


@dataclass
class ReplayResult:
    exit_code: int | None
    term_signal: int | None
    wall_ms: float
    stdout: str
    stderr: str


def _copier_argv(args: dict, handshake: bool = False, done_file: str | None = None) -> list[str]:
    argv = [sys.executable, "-m", "syschaos.fixtures.copier"]
    if "count" in args:
        argv += ["--count", str(args["count"])]
    if "reads" in args:
        argv += ["--reads", str(args["reads"])]
    if "writes" in args:
        argv += ["--writes", str(args["writes"])]
    if "bs" in args:
        argv += ["--bs", str(args["bs"])]
    if args.get("abort_on_error"):
        argv.append("--abort-on-error")
    if handshake:
        argv.append("--handshake")
    if done_file:
        argv += ["--done-file", done_file]
    return argv


_FIXTURE_REGISTRY = {
    "copier": _copier_argv,
}


def fixture_argv(name: str, args: dict, handshake: bool = False,
                 done_file: str | None = None) -> list[str]:
    """Command line for a registered fixture; raises KeyError for unknown names."""
    builder = _FIXTURE_REGISTRY.get(name)
    if builder is None:
        raise KeyError(f"unknown fixture {name!r}; registered: {sorted(_FIXTURE_REGISTRY)}")
    return builder(args, handshake=handshake, done_file=done_file)


def replay_file_workload(command: FixtureCommand, store: MetricsStore | None = None,
                         labels: dict[str, str] | None = None,
                         timeout_s: float = 600.0) -> ReplayResult:
    """Run a registered syscall-heavy fixture to completion and time it."""
    argv = fixture_argv(command.name, dict(command.args))
    start = time.monotonic_ns()
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout_s)
    wall_ms = (time.monotonic_ns() - start) / 1e6
    code, sig = (proc.returncode, None) if proc.returncode >= 0 else (None, -proc.returncode)
    if store is not None:
        key = SeriesKey("workload.wall_ms", labels or {})
        store.append(key, MetricSample(time.monotonic_ns(), wall_ms))
    return ReplayResult(code, sig, wall_ms, proc.stdout, proc.stderr)


def load_workload(data: dict):
    """Parse the config-file representation of a workload."""
    kind = data.get("kind", "http")
    if kind == "http":
        return WorkloadSpec.from_dict(data)
    if kind == "fixture":
        return FixtureCommand.from_dict(data)
    raise ValueError(f"unknown workload kind {kind!r}")


def parse_workload_file(path: str):
    with open(path, encoding="utf-8") as fh:
        return load_workload(json.load(fh))
