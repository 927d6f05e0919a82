"""Diff engine: summaries, the label ladder, spike detection, verdicts."""

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from syschaos.diffing import (BehaviorLabel, BehaviorSnapshot, ClassifierConfig,
                              DEFAULT_CLASSIFIER, EMPTY_STATS, NoBaseline, SeriesStats,
                              Verdict, activity, build_snapshot, classify, detect_spike,
                              diff, label_series, series_kind, summarize)
from syschaos.monitor import ALIVE_SERIES
from syschaos.store import MetricSample, MetricsStore, SeriesKey, TimeRange
from syschaos.tables import DelaySpec, errno_by_name, syscall_by_name
from syschaos.tracer import PerturbationSpec


def stats(mean=1.0, std=0.0, max_=None, count=10, first=None, last=None, duration=10.0):
    return SeriesStats(mean=mean, std=std, min=0.0, max=max_ if max_ is not None else mean,
                       first=first if first is not None else mean,
                       last=last if last is not None else mean,
                       count=count, duration_s=duration)


def snapshot(phase, summaries=None, crashed=False, histogram=None, window=(0, 10**10)):
    return BehaviorSnapshot(phase, TimeRange(*window), summaries or {}, crashed,
                            histogram or {})


# -- summarize -------------------------------------------------------------

def test_summarize_basic():
    store = MetricsStore()
    key = SeriesKey("s")
    for t, v in enumerate([1.0, 1.0, 1.0], start=1):
        store.append(key, MetricSample(t, v))
    out = summarize(store, [key], TimeRange(0, 10))
    assert out["s"].mean == 1.0 and out["s"].std == 0.0 and out["s"].count == 3


def test_summarize_min_max_mean():
    store = MetricsStore()
    key = SeriesKey("s")
    store.append(key, MetricSample(1, 0.0))
    store.append(key, MetricSample(2, 10.0))
    out = summarize(store, [key], TimeRange(0, 10))["s"]
    assert out.mean == 5.0 and out.max == 10.0 and out.min == 0.0
    assert out.first == 0.0 and out.last == 10.0


def test_summarize_against_brute_force():
    rng = random.Random(7)
    values = [rng.uniform(-100, 100) for _ in range(10_000)]
    store = MetricsStore()
    key = SeriesKey("s")
    for i, v in enumerate(values, start=1):
        store.append(key, MetricSample(i, v))
    got = summarize(store, [key], TimeRange(0, 10**9))["s"]
    brute_mean = sum(values) / len(values)
    brute_var = sum((v - brute_mean) ** 2 for v in values) / len(values)
    assert got.mean == pytest.approx(brute_mean, rel=1e-9)
    assert got.std == pytest.approx(math.sqrt(brute_var), rel=1e-9)


def test_summarize_respects_window():
    store = MetricsStore()
    key = SeriesKey("s")
    for t in range(1, 11):
        store.append(key, MetricSample(t, float(t)))
    out = summarize(store, [key], TimeRange(3, 5))["s"]
    assert out.count == 3 and out.mean == 4.0


def test_summarize_empty_series():
    store = MetricsStore()
    out = summarize(store, [SeriesKey("missing")], TimeRange(0, 10))
    assert out["missing"] == EMPTY_STATS


# -- classify ---------------------------------------------------------------

def oracle_band(ratio: float, cfg: ClassifierConfig) -> BehaviorLabel:
    """Straight-line reimplementation of the documented threshold ladder."""
    if ratio <= cfg.stops:
        return BehaviorLabel.STOPS
    elif ratio <= cfg.tiny:
        return BehaviorLabel.TINY
    elif ratio <= cfg.big_dip:
        return BehaviorLabel.BIG_DIP
    elif ratio <= cfg.small:
        return BehaviorLabel.SMALL
    elif ratio <= cfg.dip:
        return BehaviorLabel.DIP
    elif ratio < cfg.increase:
        return BehaviorLabel.NORMAL
    else:
        return BehaviorLabel.INCREASE


def test_classify_identity_is_normal():
    s = stats(mean=42.0, std=3.0)
    assert classify(s, s) is BehaviorLabel.NORMAL


def test_classify_requires_baseline():
    with pytest.raises(NoBaseline):
        classify(EMPTY_STATS, stats())


def test_classify_boundaries():
    base = stats(mean=100.0)
    cases = {
        1.0: BehaviorLabel.STOPS,       # r = 0.01
        1.001: BehaviorLabel.TINY,
        10.0: BehaviorLabel.TINY,       # r = 0.10
        25.0: BehaviorLabel.BIG_DIP,    # r = 0.25
        50.0: BehaviorLabel.SMALL,      # r = 0.50
        75.0: BehaviorLabel.DIP,        # r = 0.75
        75.001: BehaviorLabel.NORMAL,
        124.999: BehaviorLabel.NORMAL,
        125.0: BehaviorLabel.INCREASE,  # r = 1.25
        500.0: BehaviorLabel.INCREASE,
    }
    for mean, expected in cases.items():
        assert classify(base, stats(mean=mean)) is expected, mean


def test_classify_zero_baseline():
    zero = stats(mean=0.0)
    assert classify(zero, stats(mean=0.0)) is BehaviorLabel.NORMAL
    assert classify(zero, stats(mean=5.0)) is BehaviorLabel.INCREASE


def test_classify_observed_missing_means_stops():
    assert classify(stats(mean=10.0), EMPTY_STATS) is BehaviorLabel.STOPS


def test_classify_min_activity_floor():
    cfg = ClassifierConfig(min_activity=1.0)
    assert classify(stats(mean=0.2), stats(mean=0.9), config=cfg) is BehaviorLabel.NORMAL
    assert classify(stats(mean=0.2), stats(mean=2.0), config=cfg) is BehaviorLabel.INCREASE


def test_classify_counter_uses_rates():
    base = stats(first=0.0, last=1000.0, duration=10.0, mean=500.0)  # 100/s
    observed = stats(first=1000.0, last=1010.0, duration=10.0, mean=1005.0)  # 1/s
    assert classify(base, observed, kind="counter") is BehaviorLabel.STOPS
    assert classify(base, base, kind="counter") is BehaviorLabel.NORMAL


def test_classify_event_uses_count_rate():
    base = stats(mean=1.0, count=100, duration=10.0)  # 10 events/s
    observed = stats(mean=1.0, count=5, duration=10.0)  # 0.5/s, ratio 0.05
    assert classify(base, observed, kind="event") is BehaviorLabel.TINY
    assert classify(base, stats(mean=1.0, count=40, duration=10.0),
                    kind="event") is BehaviorLabel.SMALL  # ratio 0.4


def test_randomized_classify_matches_oracle():
    rng = random.Random(2024)
    for _ in range(200):
        b_mean = rng.choice([0.0, rng.uniform(0.001, 1000.0)])
        o_mean = rng.choice([0.0, rng.uniform(0.001, 2000.0)])
        base = stats(mean=b_mean, std=rng.uniform(0, 10))
        observed = stats(mean=o_mean, std=rng.uniform(0, 10))
        got = classify(base, observed)
        if b_mean <= 0:
            expected = BehaviorLabel.NORMAL if o_mean <= 0 else BehaviorLabel.INCREASE
        else:
            expected = oracle_band(o_mean / b_mean, DEFAULT_CLASSIFIER)
        assert got is expected, (b_mean, o_mean)


@given(st.floats(0.0, 1e6), st.floats(0.0, 1e4), st.integers(1, 1000))
@settings(max_examples=150, deadline=None)
def test_classify_self_is_always_normal(mean, std, count):
    s = stats(mean=mean, std=std, count=count)
    assert classify(s, s) is BehaviorLabel.NORMAL


@given(st.floats(0.001, 1e6), st.floats(0.0, 1e6))
@settings(max_examples=150, deadline=None)
def test_exactly_one_band_applies(base_mean, observed_mean):
    got = classify(stats(mean=base_mean), stats(mean=observed_mean))
    expected = oracle_band(observed_mean / base_mean, DEFAULT_CLASSIFIER)
    assert got is expected


# -- spike -------------------------------------------------------------------

def test_spike_detection():
    base = stats(mean=10.0, std=1.0)
    assert detect_spike(base, stats(mean=10.0, max_=14.0)) is True  # > 10 + 3
    assert detect_spike(base, stats(mean=10.0, max_=12.9)) is False


def test_spike_constant_baseline_uses_synthetic_std():
    base = stats(mean=100.0, std=0.0)
    # synthetic std = 5% of mean -> threshold 115
    assert detect_spike(base, stats(mean=100.0, max_=116.0)) is True
    assert detect_spike(base, stats(mean=100.0, max_=114.0)) is False


def test_no_self_spike_for_constant_series():
    s = stats(mean=50.0, std=0.0)
    assert detect_spike(s, s) is False


def test_label_series_combines_band_and_spike():
    base = stats(mean=10.0, std=1.0)
    lbl = label_series(base, stats(mean=10.0, max_=20.0))
    assert str(lbl) == "spike"
    lbl2 = label_series(base, stats(mean=5.0, max_=20.0))
    assert str(lbl2) == "small, spike"
    lbl3 = label_series(base, stats(mean=10.0, max_=10.0))
    assert str(lbl3) == "normal"


def test_series_kind_mapping():
    assert series_kind("net.rx_bytes") == "counter"
    assert series_kind("http.status.200") == "event"
    assert series_kind("cpu.usage_pct") == "gauge"
    assert series_kind("syscall.rate.read") == "gauge"


# -- diff ---------------------------------------------------------------------

def make_spec():
    return PerturbationSpec(syscall_by_name("open"), errno_by_name("EACCES"), DelaySpec(0))


def test_diff_identical_phases_survive():
    summaries = {"cpu.usage_pct": stats(mean=10.0)}
    report = diff(snapshot("before", summaries, histogram={200: 50}),
                  snapshot("during", summaries, histogram={200: 50}),
                  snapshot("after", summaries, histogram={200: 50}),
                  perturbation=make_spec())
    assert report.verdict is Verdict.SURVIVED
    assert all(str(l) == "normal" for l in report.during_labels.values())
    assert not report.notes


def test_diff_crash_dominates():
    summaries = {"cpu.usage_pct": stats(mean=10.0)}
    report = diff(snapshot("before", summaries, histogram={200: 50}),
                  snapshot("during", summaries, crashed=True),
                  snapshot("after", summaries),
                  perturbation=make_spec())
    assert report.verdict is Verdict.CRASHED
    assert report.columns_absent
    assert report.during_labels == {} and report.after_labels == {}


def test_diff_after_phase_crash_keeps_labels():
    summaries = {"cpu.usage_pct": stats(mean=10.0)}
    report = diff(snapshot("before", summaries),
                  snapshot("during", summaries),
                  snapshot("after", summaries, crashed=True))
    assert report.verdict is Verdict.CRASHED
    assert not report.columns_absent
    assert report.during_labels  # during data stays reportable


def test_diff_domain_change_degrades():
    summaries = {"cpu.usage_pct": stats(mean=10.0)}
    report = diff(snapshot("before", summaries, histogram={200: 100}),
                  snapshot("during", summaries, histogram={403: 100}),
                  snapshot("after", summaries, histogram={200: 100}),
                  perturbation=make_spec())
    assert report.verdict is Verdict.DEGRADED
    assert report.domain.dominant_status == 403
    assert report.domain.changed
    assert report.domain.note == "response semantics changed"


def test_diff_metric_deviation_degrades_and_notes_lasting():
    report = diff(snapshot("before", {"cpu.usage_pct": stats(mean=100.0)}),
                  snapshot("during", {"cpu.usage_pct": stats(mean=10.0)}),
                  snapshot("after", {"cpu.usage_pct": stats(mean=10.0)}))
    assert report.verdict is Verdict.DEGRADED
    assert str(report.during_labels["cpu.usage_pct"]) == "tiny"
    assert any("long-lasting" in note for note in report.notes)


def test_diff_recovery_has_no_lasting_note():
    report = diff(snapshot("before", {"cpu.usage_pct": stats(mean=100.0)}),
                  snapshot("during", {"cpu.usage_pct": stats(mean=10.0)}),
                  snapshot("after", {"cpu.usage_pct": stats(mean=100.0)}))
    assert report.verdict is Verdict.DEGRADED
    assert not any("long-lasting" in note for note in report.notes)


def test_diff_is_pure():
    args = (snapshot("before", {"x": stats(mean=3.0)}, histogram={200: 10}),
            snapshot("during", {"x": stats(mean=1.0)}, histogram={500: 10}),
            snapshot("after", {"x": stats(mean=3.0)}, histogram={200: 10}))
    first = diff(*args, perturbation=make_spec())
    second = diff(*args, perturbation=make_spec())
    assert first.to_bytes() == second.to_bytes()


def test_dominant_share_threshold():
    summaries = {"cpu.usage_pct": stats(mean=10.0)}
    report = diff(snapshot("before", summaries, histogram={200: 60, 404: 40}),
                  snapshot("during", summaries, histogram={200: 30, 403: 30, 404: 40}),
                  snapshot("after", summaries, histogram={200: 100}))
    assert report.domain.dominant_status is None  # nothing reaches 50%


def test_build_snapshot_from_store():
    store = MetricsStore()
    labels = {"exp": "e1", "phase": "during"}
    cpu = SeriesKey("cpu.usage_pct", labels)
    alive = SeriesKey(ALIVE_SERIES, labels)
    s200 = SeriesKey("http.status.200", labels)
    s403 = SeriesKey("http.status.403", labels)
    for t in range(1, 6):
        store.append(cpu, MetricSample(t, 50.0))
    store.append(alive, MetricSample(2, 1.0))
    store.append(alive, MetricSample(4, 0.0))
    store.append(s200, MetricSample(1, 1.0))
    for t in range(2, 8):
        store.append(s403, MetricSample(t, 1.0))
    snap = build_snapshot(store, "during", TimeRange(0, 10), labels)
    assert snap.crashed
    assert snap.http_status_histogram == {200: 1, 403: 6}
    assert snap.summaries["cpu.usage_pct"].mean == 50.0
    assert ALIVE_SERIES not in snap.summaries
    assert not any(n.startswith("http.status.") for n in snap.summaries)


def test_activity_of_empty_is_zero():
    assert activity(EMPTY_STATS, "gauge") == 0.0
    assert activity(EMPTY_STATS, "counter") == 0.0
    assert activity(EMPTY_STATS, "event") == 0.0
