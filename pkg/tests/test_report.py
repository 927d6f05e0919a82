"""Report renderer: SVG geometry and determinism, tables, export round trips."""

import csv
import io
import xml.etree.ElementTree as ET

import pytest

from syschaos.diffing import (BehaviorLabel, BehaviorSnapshot, DiffReport, DomainVerdict,
                              SeriesLabel, SeriesStats, Verdict)
from syschaos.orchestrator import CampaignConfig, CampaignResult, ExperimentResult
from syschaos.report import (CHART_METRICS, ChartSpec, IncrementalWriter, export_results,
                             load_results, render_campaign_table, render_chart,
                             render_experiment_charts, x_scale)
from syschaos.store import MetricSample, MetricsStore, SeriesKey, TimeRange
from syschaos.tables import DelaySpec, ErrnoCode, SyscallId
from syschaos.tracer import PerturbationSpec

SVGNS = "{http://www.w3.org/2000/svg}"


def make_spec(name="open", number=2, err=("EACCES", 13), delay=0):
    code = ErrnoCode(*err) if err else None
    return PerturbationSpec(SyscallId(name, number), code, DelaySpec(delay))


def make_store_with_series(key: SeriesKey, points):
    store = MetricsStore()
    for t, v in points:
        store.append(key, MetricSample(t, v))
    return store


def chart_rects(svg: str):
    root = ET.fromstring(svg)
    return [el for el in root.iter(f"{SVGNS}rect")
            if el.get("class") == "perturbation-band"]


def test_chart_renders_polyline_and_band():
    key = SeriesKey("cpu.usage_pct", {"phase": "before"})
    store = make_store_with_series(key, [(i * 10, 50.0) for i in range(1, 11)])
    spec = ChartSpec((key,), TimeRange(0, 120), (TimeRange(40, 80),), title="cpu")
    svg = render_chart(spec, store)
    root = ET.fromstring(svg)
    polylines = [el for el in root.iter(f"{SVGNS}polyline")]
    assert len(polylines) == 1
    bands = chart_rects(svg)
    assert len(bands) == 1


def test_chart_band_geometry_matches_transform():
    key = SeriesKey("s")
    store = make_store_with_series(key, [(i, float(i)) for i in range(1, 100)])
    window = TimeRange(25, 75)
    spec = ChartSpec((key,), TimeRange(0, 100), (window,))
    svg = render_chart(spec, store)
    band = chart_rects(svg)[0]
    x = float(band.get("x"))
    width = float(band.get("width"))
    expected_x = x_scale(window.start, spec.time_range)
    expected_end = x_scale(window.end, spec.time_range)
    assert abs(x - expected_x) <= 0.5
    assert abs((x + width) - expected_end) <= 0.5


def test_chart_two_windows_two_bands():
    key = SeriesKey("s")
    store = make_store_with_series(key, [(i, 1.0) for i in range(1, 50)])
    spec = ChartSpec((key,), TimeRange(0, 100), (TimeRange(10, 20), TimeRange(60, 70)))
    assert len(chart_rects(render_chart(spec, store))) == 2


def test_chart_window_outside_range_rejected():
    with pytest.raises(ValueError):
        ChartSpec((SeriesKey("s"),), TimeRange(50, 100), (TimeRange(0, 60),))


def test_chart_deterministic_bytes():
    key = SeriesKey("s")
    store = make_store_with_series(key, [(i, i * 1.5) for i in range(1, 200)])
    spec = ChartSpec((key,), TimeRange(0, 250), (TimeRange(100, 150),), title="t")
    assert render_chart(spec, store) == render_chart(spec, store)


def test_chart_empty_series_notice():
    svg = render_chart(ChartSpec((SeriesKey("missing"),), TimeRange(0, 10)), MetricsStore())
    root = ET.fromstring(svg)
    notices = [el for el in root.iter(f"{SVGNS}text") if el.get("class") == "notice"]
    assert notices and "no samples" in notices[0].text


def snapshot_stub(phase, crashed=False, mean=10.0, histogram=None, window=(0, 100)):
    return BehaviorSnapshot(phase, TimeRange(*window),
                            {"cpu.usage_pct": SeriesStats(mean=mean, count=5,
                                                          duration_s=1.0, max=mean,
                                                          first=mean, last=mean)},
                            crashed, histogram or {})


def result_stub(spec, verdict=Verdict.SURVIVED, crashed=False, round_index=0,
                labels=None, eid="abc123def456"):
    report = DiffReport(
        perturbation=spec,
        verdict=verdict,
        during_labels=labels if labels is not None else
        {"cpu.usage_pct": SeriesLabel(BehaviorLabel.NORMAL)},
        after_labels={},
        domain=DomainVerdict(200, 1.0, False, ""),
        notes=(),
        columns_absent=crashed,
    )
    if crashed:
        report = DiffReport(spec, Verdict.CRASHED, {}, {}, DomainVerdict(None, 0.0, False),
                            ("target crashed during the experiment",), True)
    snapshots = {
        "before": snapshot_stub("before", window=(0, 100)),
        "during": snapshot_stub("during", crashed=crashed, window=(101, 200)),
        "after": snapshot_stub("after", window=(201, 300)),
    }
    return ExperimentResult(spec, eid, round_index, snapshots, report)


def test_table_crash_row():
    spec = make_spec("select", 23)
    result = CampaignResult((spec,), {spec: [result_stub(spec, crashed=True)]})
    table = render_campaign_table(result, "markdown")
    row = table.splitlines()[2]
    assert "| select | EACCES | - | crash | - | - | - | - | - | crashed |" == row


def test_table_normal_row_and_columns():
    spec = make_spec()
    labels = {
        "cpu.usage_pct": SeriesLabel(BehaviorLabel.DIP),
        "mem.rss_bytes": SeriesLabel(BehaviorLabel.NORMAL),
        "net.rx_bytes": SeriesLabel(BehaviorLabel.STOPS),
        "net.tx_bytes": SeriesLabel(BehaviorLabel.NORMAL),
        "http.latency_ms": SeriesLabel(BehaviorLabel.NORMAL, spike=True),
        "syscall.rate.total": SeriesLabel(BehaviorLabel.INCREASE),
    }
    result = CampaignResult((spec,), {spec: [result_stub(spec, Verdict.DEGRADED,
                                                         labels=labels)]})
    table = render_campaign_table(result, "markdown")
    header = table.splitlines()[0]
    assert header == ("| syscall | error | delay | http | latency | syscalls "
                      "| network | cpu | memory | verdict |")
    row = table.splitlines()[2]
    cells = [c.strip() for c in row.strip("|").split("|")]
    assert cells == ["open", "EACCES", "-", "200 (100%)", "spike", "increase",
                     "stops", "dip", "normal", "degraded"]


def test_table_csv_round_trip():
    spec = make_spec(delay=1000)
    result = CampaignResult((spec,), {spec: [result_stub(spec)]})
    text = render_campaign_table(result, "csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(("syscall", "error", "delay", "http", "latency",
                            "syscalls", "network", "cpu", "memory", "verdict"))
    rewritten = io.StringIO()
    writer = csv.writer(rewritten)
    writer.writerows(rows)
    assert list(csv.reader(io.StringIO(rewritten.getvalue()))) == rows


def test_table_row_count_is_plan_times_rounds():
    specs = [make_spec("open", 2), make_spec("read", 0), make_spec("write", 1)]
    results = {s: [result_stub(s, round_index=r) for r in range(3)] for s in specs}
    result = CampaignResult(tuple(specs), results)
    table = render_campaign_table(result, "csv")
    assert len(table.strip().splitlines()) == 1 + 3 * 3


def test_error_experiment_row():
    spec = make_spec()
    exp = ExperimentResult(spec, "deadbeef0000", 0, {}, None, (), error="attach failed")
    result = CampaignResult((spec,), {spec: [exp]})
    row = render_campaign_table(result, "markdown").splitlines()[2]
    assert "error" in row


def test_export_load_round_trip(tmp_path):
    specs = [make_spec("open", 2), make_spec("select", 23, err=None, delay=500)]
    results = {s: [result_stub(s, round_index=r, eid=f"e{i}{r}") for r in range(2)]
               for i, s in enumerate(specs)}
    result = CampaignResult(tuple(specs), results)
    export_results(result, str(tmp_path))
    reloaded = load_results(str(tmp_path))
    assert reloaded == result


def test_export_crashed_and_error_round_trip(tmp_path):
    spec = make_spec("select", 23)
    error_exp = ExperimentResult(spec, "feedface0000", 1, {}, None, (), error="boom")
    result = CampaignResult((spec,), {spec: [result_stub(spec, crashed=True), error_exp]})
    export_results(result, str(tmp_path))
    assert load_results(str(tmp_path)) == result


def test_export_tree_shape_for_large_campaign(tmp_path):
    # 180 synthetic experiments -> 180 files + 1 manifest
    specs = []
    for i in range(180):
        specs.append(make_spec("open", 2, err=("EACCES", 13), delay=i + 1))
    result = CampaignResult(tuple(specs), {s: [result_stub(s, eid=f"id{i:04d}")]
                                           for i, s in enumerate(specs)})
    export_results(result, str(tmp_path))
    files = list((tmp_path / "experiments").glob("*.json"))
    assert len(files) == 180
    assert (tmp_path / "manifest.json").exists()


def test_export_empty_campaign_manifest_only(tmp_path):
    result = CampaignResult((), {})
    export_results(result, str(tmp_path))
    assert (tmp_path / "manifest.json").exists()
    assert list((tmp_path / "experiments").glob("*")) == []
    assert load_results(str(tmp_path)) == result


def test_render_experiment_charts_one_per_metric(tmp_path):
    spec = make_spec()
    exp = result_stub(spec)
    store = MetricsStore()
    for phase, (lo, hi) in (("before", (0, 100)), ("during", (101, 200)),
                            ("after", (201, 300))):
        key = SeriesKey("cpu.usage_pct", {"exp": exp.experiment_id, "phase": phase})
        for t in range(lo + 1, hi, 10):
            store.append(key, MetricSample(t, 5.0))
    written = render_experiment_charts(exp, store, str(tmp_path))
    assert len(written) == len(CHART_METRICS)
    svg = open(written[0]).read()
    assert "perturbation-band" in svg


def test_incremental_writer_resume_cycle(tmp_path):
    spec = make_spec()
    config = CampaignConfig(target="pid:1", syscalls=("open",), errors=("EACCES",),
                            phases={"before": 1, "during": 1, "after": 1})
    writer = IncrementalWriter(str(tmp_path), config, (spec,))
    exp = result_stub(spec)
    writer.write_experiment(0, 0, exp, MetricsStore())
    writer.finalize()
    # a second writer over the same dir sees the completed work
    writer2 = IncrementalWriter(str(tmp_path), config, (spec,))
    done = writer2.completed()
    assert (0, 0) in done
    assert done[(0, 0)] == exp
    assert (tmp_path / "index.html").exists()
    assert (tmp_path / "table.csv").exists()
