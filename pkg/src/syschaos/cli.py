"""Command-line entry point: profile, experiment, campaign, report.

Exit codes for ``experiment`` follow the verdict so scripts can branch:
0 survived, 10 degraded, 20 crashed, 1 tool error. Campaign progress is
printed as one ``event=... key=value`` line per step for machine
consumption.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

from . import report as report_mod
from .monitor import resolve_target
from .orchestrator import (AttachFailed, CampaignConfig, CampaignResult, ConfigError,
                           plan_campaign, run_campaign, run_experiment)
from .store import MetricsStore
from .tables import DelaySpec, UnknownNameError, errno_by_name, syscall_by_name
from .tracer import PerturbationSpec, attach
from .workload import FixtureCommand, parse_workload_file

EXIT_SURVIVED = 0
EXIT_DEGRADED = 10
EXIT_CRASHED = 20
EXIT_TOOL_ERROR = 1

_VERDICT_EXIT = {"survived": EXIT_SURVIVED, "degraded": EXIT_DEGRADED, "crashed": EXIT_CRASHED}

_CAP_SYS_PTRACE_BIT = 19
OUTPUT_DIR_ENV = "SYSCHAOS_OUT"


def has_tracing_privilege() -> bool:
    if os.geteuid() == 0:
        return True
    try:
        with open("/proc/self/status", encoding="utf-8") as fh:
            for line in fh:
                if line.startswith("CapEff:"):
                    caps = int(line.split()[1], 16)
                    return bool(caps >> _CAP_SYS_PTRACE_BIT & 1)
    except OSError:
        pass
    return False


def _require_privilege() -> None:
    if not has_tracing_privilege():
        raise SystemExit(
            "syscall tracing needs root or the CAP_SYS_PTRACE capability; "
            "re-run as root or grant the capability "
            "(e.g. setcap cap_sys_ptrace+ep on the interpreter)")


@dataclass(frozen=True)
class ProfileReport:
    """Per-syscall invocation rates over a monitoring-only window."""

    duration_s: float
    total_calls: int
    rows: tuple[tuple[str, float, float], ...]  # (name, calls/sec, percent)

    def to_text(self) -> str:
        lines = [f"{'syscall':<24} {'calls/s':>12} {'percent':>9}"]
        for name, rate, pct in self.rows:
            lines.append(f"{name:<24} {rate:>12.2f} {pct:>8.2f}%")
        lines.append(f"{'total':<24} {self.total_calls / self.duration_s:>12.2f} "
                     f"{sum(p for _, _, p in self.rows):>8.2f}%")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["syscall,calls_per_sec,percent"]
        out += [f"{name},{rate:.6f},{pct:.6f}" for name, rate, pct in self.rows]
        return "\n".join(out) + "\n"

    def percent_of(self, name: str) -> float:
        for row_name, _, pct in self.rows:
            if row_name == name:
                return pct
        return 0.0


def profile_target(selector: str, duration_s: float, follow_children: bool = True) -> ProfileReport:
    """Attach in count-only mode and report syscall rates, descending."""
    handle = resolve_target(selector)
    session = attach(handle.root_pid, follow_children, record_events=False)
    try:
        time.sleep(duration_s)
        counters = session.counters()
    finally:
        session.detach()
    total = sum(counters.values())
    rows = []
    for name, count in sorted(counters.items(), key=lambda kv: (-kv[1], kv[0])):
        pct = 100.0 * count / total if total else 0.0
        rows.append((name, count / duration_s, pct))
    return ProfileReport(duration_s, total, tuple(rows))


def _parse_workload_arg(value: str):
    if value.startswith("fixture:"):
        rest = value[len("fixture:"):]
        name, _, query = rest.partition("?")
        args = {}
        if query:
            for pair in query.split("&"):
                k, _, v = pair.partition("=")
                args[k] = int(v) if v.isdigit() else v
        return FixtureCommand(name, tuple(sorted(args.items())))
    return parse_workload_file(value)


def _output_dir(args) -> str | None:
    if getattr(args, "out", None):
        return args.out
    return os.environ.get(OUTPUT_DIR_ENV) or None


def _progress_printer(line_sink=print):
    def emit(info: dict):
        line_sink(" ".join(f"{k}={v}" for k, v in info.items()), flush=True)
    return emit


def cmd_profile(args) -> int:
    _require_privilege()
    report = profile_target(args.target, args.duration, not args.pid_only)
    sys.stdout.write(report.to_text())
    out = _output_dir(args)
    if out:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "profile.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        print(f"event=profile-written path={path}")
    return 0


def cmd_experiment(args) -> int:
    _require_privilege()
    try:
        sid = syscall_by_name(args.syscall)
        err = errno_by_name(args.errno) if args.errno and args.errno != "0" else None
        spec = PerturbationSpec(sid, err, DelaySpec(args.delay))
    except (UnknownNameError, ValueError) as exc:
        print(f"invalid perturbation: {exc}", file=sys.stderr)
        return EXIT_TOOL_ERROR
    phases = dict(zip(("before", "during", "after"), args.phases))
    config = CampaignConfig(
        target=args.target,
        syscalls=(args.syscall,),
        phases=phases,
        workload=_parse_workload_arg(args.workload) if args.workload else None,
        follow_children=not args.pid_only,
        sample_interval_ms=args.sample_interval,
    )
    store = MetricsStore()
    try:
        result = run_experiment(config, spec, store=store)
    except AttachFailed as exc:
        print(f"attach failed: {exc}", file=sys.stderr)
        return EXIT_TOOL_ERROR
    verdict = str(result.report.verdict)
    print(f"event=verdict experiment={result.experiment_id} verdict={verdict}")
    out = _output_dir(args)
    if out:
        campaign = CampaignResult((spec,), {spec: [result]})
        report_mod.export_results(campaign, out)
        report_mod.render_experiment_charts(result, store, os.path.join(out, "charts"))
        with open(os.path.join(out, "table.md"), "w", encoding="utf-8") as fh:
            fh.write(report_mod.render_campaign_table(campaign))
        print(f"event=report-written dir={out}")
    return _VERDICT_EXIT[verdict]


def cmd_campaign(args) -> int:
    try:
        config = CampaignConfig.from_file(args.config)
        plan = plan_campaign(config)
    except (ConfigError, UnknownNameError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_TOOL_ERROR
    print(f"planned {len(plan)} experiments")
    if args.dry_run:
        for i, spec in enumerate(plan):
            print(f"event=planned index={i} spec={spec.describe()}")
        return 0
    _require_privilege()
    out = args.resume or _output_dir(args)
    result = run_campaign(config, out_dir=out, resume=bool(args.resume),
                          progress=_progress_printer())
    verdicts: dict[str, int] = {}
    for exp in result.flat():
        key = str(exp.report.verdict) if exp.report else "error"
        verdicts[key] = verdicts.get(key, 0) + 1
    print("event=campaign-done " + " ".join(f"{k}={v}" for k, v in sorted(verdicts.items())))
    return 0


def cmd_report(args) -> int:
    result = report_mod.load_results(args.campaign)
    table = report_mod.render_campaign_table(result, args.format)
    if args.out_file:
        with open(args.out_file, "w", encoding="utf-8") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syschaos",
        description="Perturb the system calls of a running process and diff its behavior.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="monitor syscall rates without injecting anything")
    p.add_argument("--target", required=True, help="pid:<n> | cgroup:<path> | name:<substr>")
    p.add_argument("--duration", type=float, default=10.0, help="seconds to observe")
    p.add_argument("--pid-only", action="store_true", help="do not follow children")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("experiment", help="run one perturbation experiment")
    p.add_argument("--target", required=True)
    p.add_argument("--syscall", required=True)
    p.add_argument("--errno", default=None, help="e.g. EACCES; omit for delay-only")
    p.add_argument("--delay", type=int, default=0, help="injected delay in ms")
    p.add_argument("--workload", default=None,
                   help="workload JSON file or fixture:<name>?k=v")
    p.add_argument("--phases", type=lambda s: [float(x) for x in s.split(",")],
                   default=[60.0, 60.0, 60.0], help="before,during,after seconds")
    p.add_argument("--sample-interval", type=int, default=1000, help="ms between samples")
    p.add_argument("--pid-only", action="store_true")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("campaign", help="run the full perturbation plan from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--dry-run", action="store_true", help="print the plan, touch nothing")
    p.add_argument("--resume", default=None, metavar="DIR",
                   help="continue a previous campaign directory")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("report", help="re-render tables from an exported campaign")
    p.add_argument("--campaign", required=True, metavar="DIR")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.add_argument("--out-file", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except (ConfigError, UnknownNameError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOOL_ERROR


if __name__ == "__main__":
    sys.exit(main())
