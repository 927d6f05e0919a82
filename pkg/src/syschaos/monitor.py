"""Target resolution and container-level resource sampling.

Metrics come from the process-information filesystem so that observation
never touches the target: CPU ticks and RSS from ``/proc/<pid>/stat`` and
``statm``, network counters from the target's own network namespace via
``/proc/<pid>/net/dev`` (all interfaces summed, loopback included, since
local workloads travel over it).

When a target has a readable cgroup directory, whole-container CPU and
memory are preferred over per-pid sums. Both hierarchies are supported by
sniffing the files actually present: ``cpu.stat``/``memory.current``
(cgroup v2 unified) or ``cpuacct.usage``/``memory.usage_in_bytes`` (v1
controller dirs). Anything the cgroup cannot provide falls back to the
per-pid path; network always comes from the namespace counters.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable

from .store import MetricSample, MetricsStore, SeriesKey

CPU_SERIES = "cpu.usage_pct"
MEM_SERIES = "mem.rss_bytes"
NET_RX_SERIES = "net.rx_bytes"
NET_TX_SERIES = "net.tx_bytes"
ALIVE_SERIES = "target.alive"

_PAGE_SIZE = os.sysconf("SC_PAGE_SIZE")
_CLK_TCK = os.sysconf("SC_CLK_TCK")


class TargetNotFound(LookupError):
    pass


class AmbiguousName(LookupError):
    def __init__(self, pattern: str, matches: list[tuple[int, str]]):
        self.matches = matches
        listing = "; ".join(f"pid {p}: {c[:60]}" for p, c in matches)
        super().__init__(f"name {pattern!r} matches {len(matches)} processes: {listing}")


class TargetDead(RuntimeError):
    pass


@dataclass(frozen=True)
class TargetHandle:
    root_pid: int
    cgroup_path: str | None = None
    label: str = ""


def _proc_alive(pid: int) -> bool:
    try:
        with open(f"/proc/{pid}/stat", "rb") as fh:
            data = fh.read()
        state = data.rsplit(b")", 1)[1].split()[0]
        return state not in (b"Z", b"X")
    except (FileNotFoundError, ProcessLookupError, IndexError):
        return False


def _proc_ticks_and_rss(pid: int) -> tuple[int, int] | None:
    try:
        with open(f"/proc/{pid}/stat", "rb") as fh:
            rest = fh.read().rsplit(b")", 1)[1].split()
        if rest[0] in (b"Z", b"X"):
            return None
        utime, stime = int(rest[11]), int(rest[12])
        with open(f"/proc/{pid}/statm", "rb") as fh:
            resident_pages = int(fh.read().split()[1])
        return utime + stime, resident_pages * _PAGE_SIZE
    except (FileNotFoundError, ProcessLookupError, ValueError, IndexError):
        return None


def _proc_net_bytes(pid: int) -> tuple[int, int] | None:
    try:
        with open(f"/proc/{pid}/net/dev", "rb") as fh:
            lines = fh.read().splitlines()[2:]
    except (FileNotFoundError, ProcessLookupError):
        return None
    rx = tx = 0
    for line in lines:
        _, _, stats = line.partition(b":")
        cols = stats.split()
        if len(cols) >= 9:
            rx += int(cols[0])
            tx += int(cols[8])
    return rx, tx


def discover_cgroup(pid: int, cgroup_root: str = "/sys/fs/cgroup") -> str | None:
    """The pid's cgroup v2 directory, when present and readable."""
    try:
        with open(f"/proc/{pid}/cgroup", encoding="utf-8") as fh:
            for line in fh:
                parts = line.strip().split(":", 2)
                if len(parts) == 3 and parts[0] == "0" and parts[1] == "":
                    path = os.path.join(cgroup_root, parts[2].lstrip("/"))
                    if os.access(path, os.R_OK):
                        return path
    except (FileNotFoundError, ProcessLookupError):
        pass
    return None


def resolve_target(selector: str, cgroup_root: str = "/sys/fs/cgroup") -> TargetHandle:
    """Resolve ``pid:<n>``, ``cgroup:<path>`` or ``name:<substring>`` to a handle."""
    kind, _, value = selector.partition(":")
    if not value:
        raise ValueError(f"selector {selector!r} is not pid:/cgroup:/name:")
    if kind == "pid":
        pid = int(value)
        if not _proc_alive(pid):
            raise TargetNotFound(f"no live process with pid {pid}")
        return TargetHandle(pid, discover_cgroup(pid, cgroup_root), label=selector)
    if kind == "cgroup":
        procs = os.path.join(value, "cgroup.procs")
        try:
            with open(procs, encoding="utf-8") as fh:
                pids = [int(x) for x in fh.read().split()]
        except FileNotFoundError:
            raise TargetNotFound(f"no readable cgroup at {value!r}") from None
        if not pids:
            raise TargetNotFound(f"cgroup {value!r} contains no processes")
        return TargetHandle(pids[0], value, label=selector)
    if kind == "name":
        me = os.getpid()
        matches: list[tuple[int, str]] = []
        for entry in os.listdir("/proc"):
            if not entry.isdigit() or int(entry) == me:
                continue
            pid = int(entry)
            try:
                with open(f"/proc/{pid}/cmdline", "rb") as fh:
                    cmdline = fh.read().replace(b"\x00", b" ").decode("utf-8", "replace").strip()
            except (FileNotFoundError, ProcessLookupError):
                continue
            if value in cmdline and _proc_alive(pid):
                matches.append((pid, cmdline))
        if not matches:
            raise TargetNotFound(f"no process matches name {value!r}")
        if len(matches) > 1:
            raise AmbiguousName(value, matches)
        pid = matches[0][0]
        return TargetHandle(pid, discover_cgroup(pid, cgroup_root), label=selector)
    raise ValueError(f"unknown selector kind {kind!r}")


class _CgroupReader:
    """Reads whatever CPU/memory files the cgroup directory offers."""

    def __init__(self, path: str):
        self.path = path
        self.cpu_file = None
        self.cpu_unit_ns = 1
        self.mem_file = None
        v2_cpu = os.path.join(path, "cpu.stat")
        v1_cpu = os.path.join(path, "cpuacct.usage")
        if os.path.isfile(v2_cpu):
            self.cpu_file, self.cpu_unit_ns = v2_cpu, 1000  # usage_usec
        elif os.path.isfile(v1_cpu):
            self.cpu_file, self.cpu_unit_ns = v1_cpu, 1
        v2_mem = os.path.join(path, "memory.current")
        v1_mem = os.path.join(path, "memory.usage_in_bytes")
        if os.path.isfile(v2_mem):
            self.mem_file = v2_mem
        elif os.path.isfile(v1_mem):
            self.mem_file = v1_mem

    def cpu_ns(self) -> int | None:
        if self.cpu_file is None:
            return None
        try:
            with open(self.cpu_file, encoding="utf-8") as fh:
                content = fh.read()
        except OSError:
            return None
        if self.cpu_file.endswith("cpu.stat"):
            for line in content.splitlines():
                if line.startswith("usage_usec"):
                    return int(line.split()[1]) * self.cpu_unit_ns
            return None
        return int(content.strip()) * self.cpu_unit_ns

    def mem_bytes(self) -> int | None:
        if self.mem_file is None:
            return None
        try:
            with open(self.mem_file, encoding="utf-8") as fh:
                return int(fh.read().strip())
        except OSError:
            return None


class ResourceMonitor:
    """Periodic sampler for one target; keeps the CPU-delta state.

    ``pid_provider`` may supply the full traced pid set (e.g. from a tracer
    session) so multi-process targets without a cgroup are summed correctly.
    """

    def __init__(self, target: TargetHandle,
                 pid_provider: Callable[[], Iterable[int]] | None = None):
        self.target = target
        self.pid_provider = pid_provider
        self.cgroup = _CgroupReader(target.cgroup_path) if target.cgroup_path else None
        self._max_pct = 100.0 * (os.cpu_count() or 1)
        self._prev_cpu_ns: float | None = None
        self._prev_wall_ns: int | None = None

    def _pids(self) -> list[int]:
        if self.pid_provider is not None:
            pids = set(self.pid_provider())
            pids.add(self.target.root_pid)
            return sorted(pids)
        return [self.target.root_pid]

    def sample(self) -> dict[str, MetricSample]:
        """One observation per series; raises TargetDead when the root is gone."""
        if not _proc_alive(self.target.root_pid):
            raise TargetDead(f"pid {self.target.root_pid} is gone")
        now = time.monotonic_ns()

        cpu_ns: float | None = None
        rss: int | None = None
        if self.cgroup is not None:
            cg_cpu = self.cgroup.cpu_ns()
            if cg_cpu is not None:
                cpu_ns = float(cg_cpu)
            rss = self.cgroup.mem_bytes()
        if cpu_ns is None or rss is None:
            ticks = 0
            rss_sum = 0
            for pid in self._pids():
                stats = _proc_ticks_and_rss(pid)
                if stats is not None:
                    ticks += stats[0]
                    rss_sum += stats[1]
            if cpu_ns is None:
                cpu_ns = ticks * (1e9 / _CLK_TCK)
            if rss is None:
                rss = rss_sum

        if self._prev_cpu_ns is None or self._prev_wall_ns is None or now <= self._prev_wall_ns:
            pct = 0.0  # first sample after start has no delta to report
        else:
            pct = 100.0 * (cpu_ns - self._prev_cpu_ns) / (now - self._prev_wall_ns)
            pct = min(max(pct, 0.0), self._max_pct)
        self._prev_cpu_ns = cpu_ns
        self._prev_wall_ns = now

        net = _proc_net_bytes(self.target.root_pid) or (0, 0)
        return {
            CPU_SERIES: MetricSample(now, pct),
            MEM_SERIES: MetricSample(now, float(rss)),
            NET_RX_SERIES: MetricSample(now, float(net[0])),
            NET_TX_SERIES: MetricSample(now, float(net[1])),
        }


@dataclass
class SamplingHandle:
    """A running background sampler; stop() is idempotent."""

    thread: threading.Thread
    _stop: threading.Event

    def stop(self) -> None:
        self._stop.set()
        self.thread.join(timeout=10.0)

    @property
    def running(self) -> bool:
        return self.thread.is_alive()


def start_sampling(target: TargetHandle, interval_ms: int, store: MetricsStore,
                   labels: dict[str, str] | None = None,
                   monitor: ResourceMonitor | None = None,
                   death_marker: bool = True) -> SamplingHandle:
    """Append one sample set per interval until stopped or target death.

    On death a terminal ``target.alive=0`` sample is appended (unless
    ``death_marker`` is off, for targets whose exit is the expected end of
    a phase) and the sampler stops on its own.
    """
    if interval_ms < 100:
        raise ValueError(f"interval must be >= 100 ms, got {interval_ms}")
    mon = monitor or ResourceMonitor(target)
    keys = {name: SeriesKey(name, labels or {}) for name in
            (CPU_SERIES, MEM_SERIES, NET_RX_SERIES, NET_TX_SERIES, ALIVE_SERIES)}
    stop = threading.Event()

    def loop():
        interval = interval_ms / 1000.0
        next_at = time.monotonic() + interval
        while not stop.is_set():
            delay = next_at - time.monotonic()
            if delay > 0 and stop.wait(delay):
                break
            next_at += interval
            try:
                samples = mon.sample()
            except TargetDead:
                if death_marker:
                    store.append(keys[ALIVE_SERIES], MetricSample(time.monotonic_ns(), 0.0))
                break
            for name, sample in samples.items():
                store.append(keys[name], sample)
            store.append(keys[ALIVE_SERIES], MetricSample(time.monotonic_ns(), 1.0))

    thread = threading.Thread(target=loop, name=f"sampler-{target.root_pid}", daemon=True)
    thread.start()
    return SamplingHandle(thread, stop)
