"""Campaign planning and the before/during/after experiment protocol.

An experiment attaches the tracer and monitor to the target, measures a
clean baseline phase, activates one perturbation for the during phase,
deactivates it for the after phase, and diffs the three behavior
snapshots. A campaign runs one experiment per planned perturbation per
round, persisting results incrementally so an interrupted campaign can be
resumed.

The plan enumerates syscalls-major, then error codes (none first), then
delays (none first), skipping the no-op combination; that yields
|T| * ((|E|+1)(|D|+1) - 1) experiments, and the error-free delay rows come
first for each syscall.

The baseline is re-measured per experiment by default, which makes every
diff self-contained against target drift; ``shared_baseline`` restores the
measure-once mode where the first experiment's baseline serves all later
ones.
"""

from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field, replace

from . import tracer as tracer_mod
from .diffing import (BehaviorSnapshot, ClassifierConfig, DiffReport, build_snapshot, diff)
from .monitor import (ALIVE_SERIES, ResourceMonitor, TargetHandle, resolve_target,
                      start_sampling)
from .store import MetricSample, MetricsStore, SeriesKey, TimeRange
from .tables import DEFAULT_ARCH, DelaySpec, ErrnoCode, errno_by_name, syscall_by_name
from .tracer import PerturbationSpec, TracerSession
from .workload import (FixtureCommand, WorkloadSpec, fixture_argv, load_workload,
                       run_workload)

SYSCALL_RATE_PREFIX = "syscall.rate."
TOTAL_RATE_SERIES = SYSCALL_RATE_PREFIX + "total"

PHASES = ("before", "during", "after")


class ConfigError(ValueError):
    """A campaign config problem, naming the offending field."""

    def __init__(self, fieldname: str, message: str):
        self.fieldname = fieldname
        super().__init__(f"config field {fieldname!r}: {message}")


class AttachFailed(RuntimeError):
    """This experiment could not start; the campaign moves on."""


@dataclass(frozen=True)
class CampaignConfig:
    target: str
    syscalls: tuple[str, ...]
    errors: tuple[str, ...] = ()
    delays_ms: tuple[int, ...] = ()
    phases: dict[str, float] = field(default_factory=lambda: {"before": 60.0, "during": 60.0, "after": 60.0})
    workload: WorkloadSpec | FixtureCommand | None = None
    rounds: int = 1
    restart_cmd: tuple[str, ...] | None = None
    thresholds: ClassifierConfig = field(
        default_factory=lambda: ClassifierConfig(min_activity=1.0))
    sample_interval_ms: int = 1000
    follow_children: bool = True
    shared_baseline: bool = False
    arch: str = DEFAULT_ARCH

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds", f"must be >= 1, got {self.rounds}")
        for phase in PHASES:
            if phase not in self.phases or self.phases[phase] <= 0:
                raise ConfigError("phases", f"missing or non-positive duration for {phase!r}")
        if self.sample_interval_ms < 100:
            raise ConfigError("sample-interval-ms", "must be >= 100")

    @classmethod
    def from_dict(cls, data: dict) -> "CampaignConfig":
        def get(name, default=None):
            if name in data:
                return data[name]
            return data.get(name.replace("-", "_"), default)

        syscalls = get("syscalls")
        if not syscalls or not isinstance(syscalls, list):
            raise ConfigError("syscalls", "must be a non-empty list of syscall names")
        errors = get("errors", []) or []
        delays = get("delays", []) or []
        if any(not isinstance(d, int) or d < 0 for d in delays):
            raise ConfigError("delays", "must be a list of non-negative milliseconds")
        phases = get("phases", {"before": 60, "during": 60, "after": 60})
        workload = get("workload")
        restart = get("restart-cmd")
        if isinstance(restart, str):
            restart = shlex.split(restart)
        thresholds = get("thresholds")
        try:
            threshold_cfg = (ClassifierConfig(min_activity=1.0) if thresholds is None
                             else ClassifierConfig.from_dict(thresholds))
        except TypeError as exc:
            raise ConfigError("thresholds", str(exc)) from None
        return cls(
            target=get("target", ""),
            syscalls=tuple(syscalls),
            errors=tuple(errors),
            delays_ms=tuple(delays),
            phases={k: float(v) for k, v in phases.items()},
            workload=load_workload(workload) if workload else None,
            rounds=int(get("rounds", 1)),
            restart_cmd=tuple(restart) if restart else None,
            thresholds=threshold_cfg,
            sample_interval_ms=int(get("sample-interval-ms", 1000)),
            follow_children=bool(get("follow-children", True)),
            shared_baseline=bool(get("shared-baseline", False)),
            arch=get("arch", DEFAULT_ARCH),
        )

    @classmethod
    def from_file(cls, path: str) -> "CampaignConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<json>", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)


@dataclass(frozen=True)
class ExperimentResult:
    spec: PerturbationSpec
    experiment_id: str
    round_index: int
    snapshots: dict[str, BehaviorSnapshot]
    report: DiffReport | None
    series_keys: tuple[str, ...] = ()
    error: str | None = None


@dataclass
class CampaignResult:
    plan: tuple[PerturbationSpec, ...]
    results: dict[PerturbationSpec, list[ExperimentResult]]

    def flat(self) -> list[ExperimentResult]:
        out = []
        for spec in self.plan:
            out.extend(self.results.get(spec, []))
        return out


def plan_campaign(config: CampaignConfig) -> list[PerturbationSpec]:
    """All (t, e, d) perturbations in loop order, without the no-op pair."""
    if not config.syscalls:
        raise ConfigError("syscalls", "must be non-empty")
    errnos: list[ErrnoCode | None] = [None]
    errnos += [errno_by_name(e) for e in config.errors]
    delays: list[int] = [0, *config.delays_ms]
    plan: list[PerturbationSpec] = []
    for name in config.syscalls:
        sid = syscall_by_name(name, config.arch)
        for err in errnos:
            for delay in delays:
                if err is None and delay == 0:
                    continue  # indistinguishable from normal execution
                plan.append(PerturbationSpec(sid, err, DelaySpec(delay)))
    return plan


class _SyscallRateSampler:
    """Turns tracer counters into per-interval syscall.rate.<name> samples."""

    def __init__(self, session: TracerSession, interval_ms: int, store: MetricsStore,
                 labels: dict[str, str]):
        self.session = session
        self.interval_s = max(interval_ms, 100) / 1000.0
        self.store = store
        self.labels = labels
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        self._thread.join(timeout=10.0)

    def _append_rates(self, prev: dict[str, int], now_counts: dict[str, int], elapsed_s: float):
        if elapsed_s <= 0:
            return
        ts = time.monotonic_ns()
        total = 0
        for name in sorted(set(prev) | set(now_counts)):
            delta = now_counts.get(name, 0) - prev.get(name, 0)
            total += delta
            key = SeriesKey(SYSCALL_RATE_PREFIX + name, self.labels)
            self.store.append(key, MetricSample(ts, delta / elapsed_s))
        self.store.append(SeriesKey(TOTAL_RATE_SERIES, self.labels),
                          MetricSample(ts, total / elapsed_s))

    def _loop(self):
        prev = self.session.counters()
        last = time.monotonic()
        while not self._stop.wait(self.interval_s):
            now_counts = self.session.counters()
            now = time.monotonic()
            self._append_rates(prev, now_counts, now - last)
            prev, last = now_counts, now
        # final partial interval so short phases still get samples
        now_counts = self.session.counters()
        self._append_rates(prev, now_counts, time.monotonic() - last)


def _experiment_id(spec: PerturbationSpec, round_index: int, start_ns: int) -> str:
    text = f"{spec.describe()}|{round_index}|{start_ns}"
    return hashlib.sha1(text.encode()).hexdigest()[:12]


def run_experiment(config: CampaignConfig, spec: PerturbationSpec, round_index: int = 0,
                   store: MetricsStore | None = None,
                   baseline: BehaviorSnapshot | None = None) -> ExperimentResult:
    """One full before/during/after experiment for one perturbation."""
    store = store if store is not None else MetricsStore()
    exp_id = _experiment_id(spec, round_index, time.monotonic_ns())
    if isinstance(config.workload, FixtureCommand):
        return _run_command_experiment(config, spec, round_index, store, exp_id)
    return _run_service_experiment(config, spec, round_index, store, exp_id, baseline)


def _run_service_experiment(config, spec, round_index, store, exp_id,
                            baseline: BehaviorSnapshot | None) -> ExperimentResult:
    try:
        handle = resolve_target(config.target)
    except Exception as exc:
        raise AttachFailed(f"cannot resolve target {config.target!r}: {exc}") from exc
    try:
        session = tracer_mod.attach(handle.root_pid, config.follow_children,
                                    record_events=False, arch=config.arch)
    except Exception as exc:
        raise AttachFailed(f"cannot attach to pid {handle.root_pid}: {exc}") from exc

    mon = ResourceMonitor(handle, pid_provider=session.traced_pids)
    starts: dict[str, int] = {}
    ends: dict[str, int] = {}
    phase_labels: dict[str, dict[str, str]] = {}
    try:
        for phase in PHASES:
            if phase == "before" and baseline is not None:
                continue
            if phase == "during":
                session.set_perturbation(spec)
            elif phase == "after":
                session.set_perturbation(None)
            labels = {"exp": exp_id, "phase": phase}
            phase_labels[phase] = labels
            starts[phase] = time.monotonic_ns()
            sampler = start_sampling(handle, config.sample_interval_ms, store, labels, monitor=mon)
            rate_sampler = _SyscallRateSampler(session, config.sample_interval_ms,
                                               store, labels).start()
            try:
                if isinstance(config.workload, WorkloadSpec):
                    phase_spec = replace(config.workload, duration=config.phases[phase])
                    run_workload(phase_spec, store, labels)
                else:
                    time.sleep(config.phases[phase])
            finally:
                rate_sampler.stop()
                sampler.stop()
            ends[phase] = time.monotonic_ns()
    finally:
        session.set_perturbation(None)
        session.detach()

    ordered = [p for p in PHASES if p in starts]
    windows: dict[str, TimeRange] = {}
    for i, phase in enumerate(ordered):
        end = starts[ordered[i + 1]] - 1 if i + 1 < len(ordered) else ends[phase]
        windows[phase] = TimeRange(starts[phase], end)

    snapshots: dict[str, BehaviorSnapshot] = {}
    for phase in ordered:
        snapshots[phase] = build_snapshot(store, phase, windows[phase], phase_labels[phase])
    if baseline is not None:
        snapshots["before"] = baseline

    report = diff(snapshots["before"], snapshots["during"], snapshots["after"],
                  config.thresholds, perturbation=spec)
    keys = tuple(sorted(str(k) for k in store.keys() if k.label("exp") == exp_id))
    return ExperimentResult(spec, exp_id, round_index, snapshots, report, keys)


def _run_command_experiment(config, spec, round_index, store, exp_id) -> ExperimentResult:
    """Phase protocol for finite command workloads: one fixture run per phase.

    The fixture process is the target; it is spawned fresh for every phase
    under the start/finish handshake, so the perturbation covers exactly the
    fixture's work loop and is cleared before its summary output (a write
    perturbation must not garble the reporting of its own effects). An
    abnormal end (signal or nonzero exit) is recorded as a target.alive=0
    sample so the usual crash rule applies; a clean exit is the expected end
    of a phase.
    """
    import signal as signal_mod
    import tempfile

    command: FixtureCommand = config.workload
    try:
        fixture_argv(command.name, dict(command.args))
    except KeyError as exc:
        raise AttachFailed(str(exc)) from None

    snapshots: dict[str, BehaviorSnapshot] = {}
    windows: dict[str, TimeRange] = {}
    for phase in PHASES:
        labels = {"exp": exp_id, "phase": phase}
        done_file = tempfile.mktemp(prefix=f"syschaos-done-{exp_id}-{phase}-")
        argv = fixture_argv(command.name, dict(command.args), handshake=True,
                            done_file=done_file)
        start_ns = time.monotonic_ns()
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                text=True)
        proc.stdout.readline()  # READY banner, printed before any perturbation
        try:
            session = tracer_mod.attach(proc.pid, config.follow_children,
                                        record_events=False, arch=config.arch)
        except Exception as exc:
            proc.kill()
            proc.wait()
            raise AttachFailed(f"cannot attach to spawned fixture: {exc}") from exc
        if phase == "during":
            session.set_perturbation(spec)
        handle = TargetHandle(proc.pid, label=f"fixture:{command.name}")
        mon = ResourceMonitor(handle, pid_provider=session.traced_pids)
        sampler = start_sampling(handle, config.sample_interval_ms, store, labels,
                                 monitor=mon, death_marker=False)
        rate_sampler = _SyscallRateSampler(session, config.sample_interval_ms,
                                           store, labels).start()
        cap_s = max(config.phases[phase], 1.0) * 20
        deadline = time.monotonic() + cap_s
        proc.send_signal(signal_mod.SIGUSR1)
        while (not os.path.exists(done_file) and session.is_attached
               and time.monotonic() < deadline):
            time.sleep(0.02)
        session.set_perturbation(None)
        if session.is_attached:
            try:
                proc.send_signal(signal_mod.SIGUSR2)
            except ProcessLookupError:
                pass
        finished = session.wait(timeout=cap_s)
        if not finished:
            session.detach()
            proc.kill()
        rate_sampler.stop()
        sampler.stop()
        proc.communicate()
        if os.path.exists(done_file):
            os.unlink(done_file)
        exit_code, term_signal = session.root_exit or (proc.returncode, None)
        end_ns = time.monotonic_ns()
        abnormal = term_signal is not None or (exit_code or 0) != 0
        wall_key = SeriesKey("workload.wall_ms", labels)
        store.append(wall_key, MetricSample(end_ns, (end_ns - start_ns) / 1e6))
        if abnormal:
            store.append(SeriesKey(ALIVE_SERIES, labels), MetricSample(end_ns, 0.0))
        windows[phase] = TimeRange(start_ns, end_ns)
        snapshots[phase] = build_snapshot(store, phase, windows[phase], labels)

    report = diff(snapshots["before"], snapshots["during"], snapshots["after"],
                  config.thresholds, perturbation=spec)
    keys = tuple(sorted(str(k) for k in store.keys() if k.label("exp") == exp_id))
    return ExperimentResult(spec, exp_id, round_index, snapshots, report, keys)


def _restart_target(config: CampaignConfig) -> None:
    subprocess.Popen(config.restart_cmd, start_new_session=True)
    deadline = time.monotonic() + 15.0
    while time.monotonic() < deadline:
        try:
            resolve_target(config.target)
            return
        except Exception:
            time.sleep(0.2)
    raise RuntimeError(f"target {config.target!r} did not come back after restart command")


def run_campaign(config: CampaignConfig, out_dir: str | None = None,
                 resume: bool = False, progress=None) -> CampaignResult:
    """Run the full plan x rounds, persisting incrementally when out_dir is set."""
    from . import report as report_mod  # deferred: report renders these result types

    plan = plan_campaign(config)
    result = CampaignResult(tuple(plan), {spec: [] for spec in plan})
    writer = report_mod.IncrementalWriter(out_dir, config, plan) if out_dir else None
    completed = writer.completed() if (writer and resume) else {}

    def emit(**kv):
        if progress:
            progress(dict(kv))

    baseline: BehaviorSnapshot | None = None
    for round_index in range(config.rounds):
        for idx, spec in enumerate(plan):
            if (idx, round_index) in completed:
                result.results[spec].append(completed[(idx, round_index)])
                emit(event="experiment-skipped", index=idx, round=round_index)
                continue
            emit(event="experiment-start", index=idx, round=round_index,
                 spec=spec.describe())
            store = MetricsStore()
            try:
                exp = run_experiment(config, spec, round_index, store,
                                     baseline=baseline if config.shared_baseline else None)
                if config.shared_baseline and baseline is None:
                    baseline = exp.snapshots.get("before")
            except AttachFailed as exc:
                exp = ExperimentResult(spec, _experiment_id(spec, round_index,
                                                            time.monotonic_ns()),
                                       round_index, {}, None, (), error=str(exc))
            result.results[spec].append(exp)
            if writer:
                writer.write_experiment(idx, round_index, exp, store)
            emit(event="experiment-done", index=idx, round=round_index,
                 verdict=str(exp.report.verdict) if exp.report else "error")
            crashed = exp.report is not None and str(exp.report.verdict) == "crashed"
            if (crashed or exp.error) and config.restart_cmd:
                _restart_target(config)
                emit(event="target-restarted", index=idx)
    if writer:
        writer.finalize()
    return result
