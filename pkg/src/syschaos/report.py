"""Static rendering and persistence of campaign results.

Charts are plain SVG 1.1 documents: one polyline per series over a linear
time axis, with each perturbation window drawn as a translucent band whose
x-extent maps exactly to the window. Output is deterministic: identical
inputs produce identical bytes, and coordinates are written with fixed
precision so tests can parse them back.

Campaign tables mirror the per-perturbation row layout of the experiment
write-ups: syscall, error code, delay, then the HTTP outcome and one
qualitative label per monitored metric group, then the verdict.

Exported results are a versioned JSON tree: one manifest plus one file per
experiment, loadable back into an equal CampaignResult.
"""

from __future__ import annotations

import csv
import html
import io
import json
import os
import time
from dataclasses import dataclass

from .diffing import (BehaviorLabel, BehaviorSnapshot, DiffReport, DomainVerdict,
                      SeriesLabel, SeriesStats, Verdict)
from .monitor import CPU_SERIES, MEM_SERIES, NET_RX_SERIES, NET_TX_SERIES
from .orchestrator import (CampaignConfig, CampaignResult, ExperimentResult,
                           TOTAL_RATE_SERIES)
from .store import MetricsStore, SeriesKey, TimeRange
from .tables import DelaySpec, ErrnoCode, SyscallId
from .tracer import PerturbationSpec

SCHEMA_VERSION = 1

# Chart geometry; exposed so tests can recompute the axis transform.
CHART_WIDTH = 800
CHART_HEIGHT = 300
MARGIN_LEFT = 60
MARGIN_RIGHT = 20
MARGIN_TOP = 30
MARGIN_BOTTOM = 40
PLOT_WIDTH = CHART_WIDTH - MARGIN_LEFT - MARGIN_RIGHT
PLOT_HEIGHT = CHART_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
Y_HEADROOM = 1.1

PALETTE = ("#2a7fff", "#ff7f2a", "#2aa05a", "#a02a5a", "#7f2aff", "#5a5a5a")


@dataclass(frozen=True)
class ChartSpec:
    series_keys: tuple[SeriesKey, ...]
    time_range: TimeRange
    perturbation_windows: tuple[TimeRange, ...] = ()
    title: str = ""
    y_label: str = ""

    def __post_init__(self):
        for w in self.perturbation_windows:
            if w.start < self.time_range.start or w.end > self.time_range.end:
                raise ValueError("perturbation window outside the chart time range")


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def x_scale(t: int, time_range: TimeRange) -> float:
    """Time to pixel x under the chart's linear axis transform."""
    span = max(time_range.end - time_range.start, 1)
    return MARGIN_LEFT + (t - time_range.start) / span * PLOT_WIDTH


def render_chart(spec: ChartSpec, store: MetricsStore) -> str:
    """One SVG line chart with perturbation-window overlays."""
    series_data = [(key, store.query(key, spec.time_range)) for key in spec.series_keys]
    all_values = [s.value for _, samples in series_data for s in samples]
    y_max = max(all_values) * Y_HEADROOM if all_values else 1.0
    if y_max <= 0:
        y_max = 1.0

    def y_scale(v: float) -> float:
        return MARGIN_TOP + PLOT_HEIGHT - (v / y_max) * PLOT_HEIGHT

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_WIDTH}" '
        f'height="{CHART_HEIGHT}" viewBox="0 0 {CHART_WIDTH} {CHART_HEIGHT}">',
        f'<rect x="0" y="0" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" fill="#ffffff"/>',
        f'<text class="title" x="{MARGIN_LEFT}" y="18" font-size="13" '
        f'font-family="sans-serif">{html.escape(spec.title)}</text>',
    ]
    for window in spec.perturbation_windows:
        x0 = x_scale(window.start, spec.time_range)
        x1 = x_scale(window.end, spec.time_range)
        parts.append(
            f'<rect class="perturbation-band" x="{_fmt(x0)}" y="{MARGIN_TOP}" '
            f'width="{_fmt(x1 - x0)}" height="{PLOT_HEIGHT}" '
            f'fill="#2a7fff" fill-opacity="0.15"/>'
        )
    # axes
    x_origin, y_origin = MARGIN_LEFT, MARGIN_TOP + PLOT_HEIGHT
    parts.append(f'<line class="axis" x1="{x_origin}" y1="{MARGIN_TOP}" x2="{x_origin}" '
                 f'y2="{y_origin}" stroke="#000000" stroke-width="1"/>')
    parts.append(f'<line class="axis" x1="{x_origin}" y1="{y_origin}" '
                 f'x2="{MARGIN_LEFT + PLOT_WIDTH}" y2="{y_origin}" '
                 f'stroke="#000000" stroke-width="1"/>')
    for i in range(5):
        v = y_max * i / 4
        y = y_scale(v)
        parts.append(f'<line x1="{x_origin - 4}" y1="{_fmt(y)}" x2="{x_origin}" '
                     f'y2="{_fmt(y)}" stroke="#000000" stroke-width="1"/>')
        parts.append(f'<text x="{x_origin - 8}" y="{_fmt(y + 4)}" font-size="10" '
                     f'font-family="sans-serif" text-anchor="end">{v:.3g}</text>')
    span_s = spec.time_range.duration_s
    for i in range(5):
        t = spec.time_range.start + (spec.time_range.end - spec.time_range.start) * i // 4
        x = x_scale(t, spec.time_range)
        parts.append(f'<line x1="{_fmt(x)}" y1="{y_origin}" x2="{_fmt(x)}" '
                     f'y2="{y_origin + 4}" stroke="#000000" stroke-width="1"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{y_origin + 16}" font-size="10" '
                     f'font-family="sans-serif" text-anchor="middle">{span_s * i / 4:.1f}s</text>')
    if spec.y_label:
        parts.append(f'<text x="14" y="{MARGIN_TOP + PLOT_HEIGHT / 2:.0f}" font-size="11" '
                     f'font-family="sans-serif" '
                     f'transform="rotate(-90 14 {MARGIN_TOP + PLOT_HEIGHT / 2:.0f})" '
                     f'text-anchor="middle">{html.escape(spec.y_label)}</text>')

    drew_any = False
    for idx, (key, samples) in enumerate(series_data):
        if not samples:
            continue
        drew_any = True
        color = PALETTE[idx % len(PALETTE)]
        points = " ".join(
            f"{_fmt(x_scale(s.timestamp, spec.time_range))},{_fmt(y_scale(s.value))}"
            for s in samples)
        parts.append(f'<polyline class="series" data-series="{html.escape(str(key))}" '
                     f'points="{points}" fill="none" stroke="{color}" stroke-width="1.5"/>')
    if not drew_any:
        parts.append(f'<text class="notice" x="{CHART_WIDTH / 2:.0f}" y="{CHART_HEIGHT / 2:.0f}" '
                     f'font-size="12" font-family="sans-serif" text-anchor="middle">'
                     f'no samples in range</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- campaign tables ------------------------------------------------------

TABLE_COLUMNS = ("syscall", "error", "delay", "http", "latency",
                 "syscalls", "network", "cpu", "memory", "verdict")

# Worst-first ordering for collapsing several series into one table cell.
_SEVERITY = (BehaviorLabel.STOPS, BehaviorLabel.TINY, BehaviorLabel.BIG_DIP,
             BehaviorLabel.SMALL, BehaviorLabel.DIP, BehaviorLabel.INCREASE,
             BehaviorLabel.NORMAL)


def _worse(a: SeriesLabel | None, b: SeriesLabel | None) -> SeriesLabel | None:
    if a is None:
        return b
    if b is None:
        return a
    ranked = min((a, b), key=lambda lbl: _SEVERITY.index(lbl.band))
    spike = a.spike or b.spike
    return SeriesLabel(ranked.band, spike)


def _row_for(exp: ExperimentResult) -> list[str]:
    spec = exp.spec
    base = [spec.syscall.name,
            spec.error.name if spec.error else "-",
            f"{spec.delay.millis}ms" if spec.delay.millis else "-"]
    if exp.error is not None or exp.report is None:
        return base + ["error", "-", "-", "-", "-", "-", "error"]
    report = exp.report
    if report.columns_absent:
        return base + ["crash", "-", "-", "-", "-", "-", str(report.verdict)]
    labels = report.during_labels

    def cell(name: str) -> str:
        lbl = labels.get(name)
        return str(lbl) if lbl is not None else "-"

    if report.domain.dominant_status is not None:
        http = f"{report.domain.dominant_status} ({report.domain.share:.0%})"
    else:
        http = "-"
    network = _worse(labels.get(NET_RX_SERIES), labels.get(NET_TX_SERIES))
    return base + [
        http,
        cell("http.latency_ms"),
        cell(TOTAL_RATE_SERIES),
        str(network) if network is not None else "-",
        cell(CPU_SERIES),
        cell(MEM_SERIES),
        str(report.verdict),
    ]


def render_campaign_table(result: CampaignResult, fmt: str = "markdown") -> str:
    rows = [_row_for(exp) for exp in result.flat()]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(TABLE_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    out = ["| " + " | ".join(TABLE_COLUMNS) + " |",
           "|" + "|".join(" --- " for _ in TABLE_COLUMNS) + "|"]
    for row in rows:
        out.append("| " + " | ".join(cell.replace("|", "/") for cell in row) + " |")
    return "\n".join(out) + "\n"


# -- structured export / import -------------------------------------------

def _spec_to_dict(spec: PerturbationSpec) -> dict:
    return {
        "syscall": spec.syscall.name,
        "syscall_number": spec.syscall.number,
        "errno": spec.error.name if spec.error else None,
        "errno_value": spec.error.value if spec.error else 0,
        "delay_ms": spec.delay.millis,
    }


def _spec_from_dict(data: dict) -> PerturbationSpec:
    err = ErrnoCode(data["errno"], data["errno_value"]) if data["errno"] else None
    return PerturbationSpec(SyscallId(data["syscall"], data["syscall_number"]),
                            err, DelaySpec(data["delay_ms"]))


def _stats_to_dict(stats: SeriesStats) -> dict:
    return {"mean": stats.mean, "std": stats.std, "min": stats.min, "max": stats.max,
            "first": stats.first, "last": stats.last, "count": stats.count,
            "duration_s": stats.duration_s}


def _snapshot_to_dict(snap: BehaviorSnapshot) -> dict:
    return {
        "phase": snap.phase,
        "window": [snap.window.start, snap.window.end],
        "crashed": snap.crashed,
        "http_status_histogram": {str(k): v for k, v in sorted(snap.http_status_histogram.items())},
        "summaries": {name: _stats_to_dict(s) for name, s in sorted(snap.summaries.items())},
    }


def _snapshot_from_dict(data: dict) -> BehaviorSnapshot:
    return BehaviorSnapshot(
        phase=data["phase"],
        window=TimeRange(*data["window"]),
        summaries={name: SeriesStats(**s) for name, s in data["summaries"].items()},
        crashed=data["crashed"],
        http_status_histogram={int(k): v for k, v in data["http_status_histogram"].items()},
    )


def _label_to_dict(lbl: SeriesLabel) -> dict:
    return {"band": lbl.band.value, "spike": lbl.spike}


def _report_to_dict(report: DiffReport) -> dict:
    return {
        "perturbation": _spec_to_dict(report.perturbation) if report.perturbation else None,
        "verdict": report.verdict.value,
        "during_labels": {k: _label_to_dict(v) for k, v in sorted(report.during_labels.items())},
        "after_labels": {k: _label_to_dict(v) for k, v in sorted(report.after_labels.items())},
        "domain": {
            "dominant_status": report.domain.dominant_status,
            "share": report.domain.share,
            "changed": report.domain.changed,
            "note": report.domain.note,
        },
        "notes": list(report.notes),
        "columns_absent": report.columns_absent,
    }


def _report_from_dict(data: dict) -> DiffReport:
    return DiffReport(
        perturbation=_spec_from_dict(data["perturbation"]) if data["perturbation"] else None,
        verdict=Verdict(data["verdict"]),
        during_labels={k: SeriesLabel(BehaviorLabel(v["band"]), v["spike"])
                       for k, v in data["during_labels"].items()},
        after_labels={k: SeriesLabel(BehaviorLabel(v["band"]), v["spike"])
                      for k, v in data["after_labels"].items()},
        domain=DomainVerdict(**data["domain"]),
        notes=tuple(data["notes"]),
        columns_absent=data["columns_absent"],
    )


def _experiment_to_dict(exp: ExperimentResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "spec": _spec_to_dict(exp.spec),
        "experiment_id": exp.experiment_id,
        "round_index": exp.round_index,
        "snapshots": {phase: _snapshot_to_dict(s) for phase, s in sorted(exp.snapshots.items())},
        "report": _report_to_dict(exp.report) if exp.report else None,
        "series_keys": list(exp.series_keys),
        "error": exp.error,
    }


def _experiment_from_dict(data: dict) -> ExperimentResult:
    return ExperimentResult(
        spec=_spec_from_dict(data["spec"]),
        experiment_id=data["experiment_id"],
        round_index=data["round_index"],
        snapshots={phase: _snapshot_from_dict(s) for phase, s in data["snapshots"].items()},
        report=_report_from_dict(data["report"]) if data["report"] else None,
        series_keys=tuple(data["series_keys"]),
        error=data["error"],
    )


def _exp_filename(index: int, round_index: int) -> str:
    return f"exp-{index:04d}-r{round_index}.json"


def export_results(result: CampaignResult, out_dir: str) -> str:
    """Write the manifest plus one JSON file per experiment; returns manifest path."""
    exp_dir = os.path.join(out_dir, "experiments")
    os.makedirs(exp_dir, exist_ok=True)
    entries = []
    for index, spec in enumerate(result.plan):
        for exp in result.results.get(spec, []):
            name = _exp_filename(index, exp.round_index)
            with open(os.path.join(exp_dir, name), "w", encoding="utf-8") as fh:
                json.dump(_experiment_to_dict(exp), fh, sort_keys=True, indent=1)
            entries.append({"file": f"experiments/{name}", "index": index,
                            "round": exp.round_index, "experiment_id": exp.experiment_id})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "plan": [_spec_to_dict(s) for s in result.plan],
        "experiments": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return path


def load_results(out_dir: str) -> CampaignResult:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    plan = tuple(_spec_from_dict(d) for d in manifest["plan"])
    results: dict[PerturbationSpec, list[ExperimentResult]] = {spec: [] for spec in plan}
    for entry in manifest["experiments"]:
        with open(os.path.join(out_dir, entry["file"]), encoding="utf-8") as fh:
            exp = _experiment_from_dict(json.load(fh))
        results[plan[entry["index"]]].append(exp)
    for specs in results.values():
        specs.sort(key=lambda e: e.round_index)
    return CampaignResult(plan, results)


CHART_METRICS = (CPU_SERIES, MEM_SERIES, NET_RX_SERIES, NET_TX_SERIES,
                 TOTAL_RATE_SERIES, "http.latency_ms")


def render_experiment_charts(exp: ExperimentResult, store: MetricsStore,
                             out_dir: str) -> list[str]:
    """One chart per base metric, phases overlaid as separate polylines."""
    if not exp.snapshots:
        return []
    phases = [p for p in ("before", "during", "after") if p in exp.snapshots]
    t0 = min(exp.snapshots[p].window.start for p in phases)
    t1 = max(exp.snapshots[p].window.end for p in phases)
    windows = (exp.snapshots["during"].window,) if "during" in exp.snapshots else ()
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for metric in CHART_METRICS:
        keys = tuple(SeriesKey(metric, {"exp": exp.experiment_id, "phase": p}) for p in phases)
        chart = ChartSpec(keys, TimeRange(t0, t1), windows,
                          title=f"{metric} under {exp.spec.describe()}", y_label=metric)
        path = os.path.join(out_dir, f"{exp.experiment_id}-{metric.replace('.', '_')}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_chart(chart, store))
        written.append(path)
    return written


class IncrementalWriter:
    """Persists campaign output as it happens so partial runs are recoverable."""

    def __init__(self, out_dir: str, config: CampaignConfig, plan):
        self.out_dir = out_dir
        self.plan = tuple(plan)
        self.exp_dir = os.path.join(out_dir, "experiments")
        self.chart_dir = os.path.join(out_dir, "charts")
        os.makedirs(self.exp_dir, exist_ok=True)
        self._entries: list[dict] = []
        self._config_summary = {
            "target": config.target,
            "syscalls": list(config.syscalls),
            "errors": list(config.errors),
            "delays": list(config.delays_ms),
            "phases": config.phases,
            "rounds": config.rounds,
        }
        manifest_path = os.path.join(out_dir, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path, encoding="utf-8") as fh:
                old = json.load(fh)
            old_plan = tuple(_spec_from_dict(d) for d in old.get("plan", []))
            if old_plan == self.plan:
                self._entries = old.get("experiments", [])
        self._write_manifest()

    def _write_manifest(self):
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config": self._config_summary,
            "plan": [_spec_to_dict(s) for s in self.plan],
            "experiments": self._entries,
        }
        with open(os.path.join(self.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)

    def completed(self) -> dict[tuple[int, int], ExperimentResult]:
        done = {}
        for entry in self._entries:
            path = os.path.join(self.out_dir, entry["file"])
            if not os.path.exists(path):
                continue
            with open(path, encoding="utf-8") as fh:
                done[(entry["index"], entry["round"])] = _experiment_from_dict(json.load(fh))
        return done

    def write_experiment(self, index: int, round_index: int, exp: ExperimentResult,
                         store: MetricsStore) -> None:
        name = _exp_filename(index, round_index)
        with open(os.path.join(self.exp_dir, name), "w", encoding="utf-8") as fh:
            json.dump(_experiment_to_dict(exp), fh, sort_keys=True, indent=1)
        metrics_name = name.replace(".json", ".metrics")
        with open(os.path.join(self.exp_dir, metrics_name), "w", encoding="utf-8") as fh:
            store.export_lines(fh)
        if exp.report is not None and not exp.error:
            render_experiment_charts(exp, store, self.chart_dir)
        self._entries = [e for e in self._entries
                         if not (e["index"] == index and e["round"] == round_index)]
        self._entries.append({"file": f"experiments/{name}", "index": index,
                              "round": round_index, "experiment_id": exp.experiment_id})
        self._entries.sort(key=lambda e: (e["index"], e["round"]))
        self._write_manifest()

    def finalize(self) -> None:
        result = CampaignResult(self.plan, {s: [] for s in self.plan})
        for (index, _round), exp in sorted(self.completed().items()):
            result.results[self.plan[index]].append(exp)
        with open(os.path.join(self.out_dir, "table.md"), "w", encoding="utf-8") as fh:
            fh.write(render_campaign_table(result, "markdown"))
        with open(os.path.join(self.out_dir, "table.csv"), "w", encoding="utf-8") as fh:
            fh.write(render_campaign_table(result, "csv"))
        self._write_index()

    def _write_index(self) -> None:
        rows = []
        for entry in self._entries:
            eid = entry["experiment_id"]
            charts = []
            if os.path.isdir(self.chart_dir):
                charts = sorted(c for c in os.listdir(self.chart_dir) if c.startswith(eid))
            links = " ".join(f'<a href="charts/{c}">{c.split("-", 1)[1][:-4]}</a>'
                             for c in charts)
            rows.append(f'<tr><td>{entry["index"]}</td><td>{entry["round"]}</td>'
                        f'<td><a href="{entry["file"]}">{eid}</a></td><td>{links}</td></tr>')
        doc = ("<!DOCTYPE html><html><head><meta charset='utf-8'>"
               "<title>campaign results</title></head><body>"
               "<h1>Campaign results</h1>"
               "<p><a href='table.md'>table.md</a> | <a href='table.csv'>table.csv</a></p>"
               "<table border='1'><tr><th>#</th><th>round</th><th>experiment</th>"
               "<th>charts</th></tr>" + "".join(rows) + "</table></body></html>\n")
        with open(os.path.join(self.out_dir, "index.html"), "w", encoding="utf-8") as fh:
            fh.write(doc)
