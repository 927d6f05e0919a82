"""Phase summaries and behavioral diffing.

Each experiment phase is summarized per series, then the during- and
after-phase summaries are compared against the before-phase baseline and
given one qualitative label each from a fixed threshold ladder over the
activity ratio r = observed / baseline:

    r <= 0.01  stops          r <= 0.50  small
    r <= 0.10  tiny           r <= 0.75  dip
    r <= 0.25  big-dip        0.75 < r < 1.25  normal
                              r >= 1.25  increase

"Activity" is the mean for gauge series, the counter rate (last - first
over the window) for cumulative series, and the event rate for count
series, so the ratio is meaningful for all three. A spike is a separate
annotation (observed max above baseline mean + 3 sigma) so that the ladder
stays a partition: exactly one band label applies to any pair. All
constants are calibration values carried in :class:`ClassifierConfig`.

The diff itself is pure: identical snapshots produce identical report
bytes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

from .monitor import ALIVE_SERIES
from .store import MetricsStore, TimeRange
from .tracer import PerturbationSpec

HTTP_STATUS_PREFIX = "http.status."
COUNTER_SERIES = ("net.rx_bytes", "net.tx_bytes")


class NoBaseline(ValueError):
    """The baseline summary has no samples to compare against."""


class BehaviorLabel(enum.Enum):
    STOPS = "stops"
    BIG_DIP = "big dip"
    DIP = "dip"
    SMALL = "small"
    TINY = "tiny"
    NORMAL = "normal"
    INCREASE = "increase"
    SPIKE = "spike"
    CRASH = "crash"

    def __str__(self) -> str:
        return self.value


class Verdict(enum.Enum):
    SURVIVED = "survived"
    DEGRADED = "degraded"
    CRASHED = "crashed"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ClassifierConfig:
    stops: float = 0.01
    tiny: float = 0.10
    big_dip: float = 0.25
    small: float = 0.50
    dip: float = 0.75
    increase: float = 1.25
    spike_sigma: float = 3.0
    synthetic_std_frac: float = 0.05  # stands in for sigma on constant baselines
    min_activity: float = 0.0  # below this on both sides a series counts as idle
    dominant_share: float = 0.50

    @classmethod
    def from_dict(cls, data: dict) -> "ClassifierConfig":
        return cls(**data)


DEFAULT_CLASSIFIER = ClassifierConfig()


@dataclass(frozen=True)
class SeriesStats:
    mean: float = 0.0
    std: float = 0.0
    min: float = 0.0
    max: float = 0.0
    first: float = 0.0
    last: float = 0.0
    count: int = 0
    duration_s: float = 0.0


EMPTY_STATS = SeriesStats()


def series_kind(name: str) -> str:
    if name in COUNTER_SERIES:
        return "counter"
    if name.startswith(HTTP_STATUS_PREFIX):
        return "event"
    return "gauge"


def activity(stats: SeriesStats, kind: str) -> float:
    """The comparable magnitude of a summary, per series kind."""
    if stats.count == 0:
        return 0.0
    if kind == "counter":
        return (stats.last - stats.first) / stats.duration_s if stats.duration_s > 0 else 0.0
    if kind == "event":
        return stats.count / stats.duration_s if stats.duration_s > 0 else float(stats.count)
    return stats.mean


def summarize(store: MetricsStore, keys, window: TimeRange) -> dict[str, SeriesStats]:
    """Per-series statistics over exactly the samples query() returns."""
    out: dict[str, SeriesStats] = {}
    for key in keys:
        samples = store.query(key, window)
        if not samples:
            out[key.name] = EMPTY_STATS
            continue
        values = [s.value for s in samples]
        n = len(values)
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
        out[key.name] = SeriesStats(
            mean=mean,
            std=math.sqrt(var),
            min=min(values),
            max=max(values),
            first=values[0],
            last=values[-1],
            count=n,
            duration_s=window.duration_s,
        )
    return out


def classify(baseline: SeriesStats, observed: SeriesStats, kind: str = "gauge",
             config: ClassifierConfig = DEFAULT_CLASSIFIER) -> BehaviorLabel:
    """The mean-band label for observed vs baseline; exactly one applies."""
    if baseline.count == 0:
        raise NoBaseline("cannot classify against an empty baseline")
    b = activity(baseline, kind)
    o = activity(observed, kind)
    if abs(b) < config.min_activity and abs(o) < config.min_activity:
        return BehaviorLabel.NORMAL
    if b <= 0:
        ratio = 1.0 if o <= 0 else math.inf
    else:
        ratio = o / b
    if ratio <= config.stops:
        return BehaviorLabel.STOPS
    if ratio <= config.tiny:
        return BehaviorLabel.TINY
    if ratio <= config.big_dip:
        return BehaviorLabel.BIG_DIP
    if ratio <= config.small:
        return BehaviorLabel.SMALL
    if ratio <= config.dip:
        return BehaviorLabel.DIP
    if ratio < config.increase:
        return BehaviorLabel.NORMAL
    return BehaviorLabel.INCREASE


def detect_spike(baseline: SeriesStats, observed: SeriesStats,
                 config: ClassifierConfig = DEFAULT_CLASSIFIER) -> bool:
    """Whether the observed max pokes above the baseline's 3-sigma band."""
    if baseline.count == 0 or observed.count == 0:
        return False
    std = baseline.std if baseline.std > 0 else config.synthetic_std_frac * abs(baseline.mean)
    return observed.max > baseline.mean + config.spike_sigma * std


@dataclass(frozen=True)
class SeriesLabel:
    band: BehaviorLabel
    spike: bool = False

    def __str__(self) -> str:
        if self.spike and self.band is BehaviorLabel.NORMAL:
            return "spike"
        if self.spike:
            return f"{self.band}, spike"
        return str(self.band)


def label_series(baseline: SeriesStats, observed: SeriesStats, kind: str = "gauge",
                 config: ClassifierConfig = DEFAULT_CLASSIFIER) -> SeriesLabel:
    band = classify(baseline, observed, kind, config)
    spike = kind == "gauge" and detect_spike(baseline, observed, config)
    return SeriesLabel(band, spike)


@dataclass(frozen=True)
class BehaviorSnapshot:
    """Aggregated behavior of one experiment phase."""

    phase: str  # before | during | after
    window: TimeRange
    summaries: dict[str, SeriesStats]
    crashed: bool
    http_status_histogram: dict[int, int]


def build_snapshot(store: MetricsStore, phase: str, window: TimeRange,
                   labels: dict[str, str]) -> BehaviorSnapshot:
    """Assemble a snapshot from every stored series carrying ``labels``."""
    wanted = set(labels.items())
    keys = [k for k in store.keys() if wanted.issubset(set(k.labels))]
    metric_keys = [k for k in keys
                   if not k.name.startswith(HTTP_STATUS_PREFIX) and k.name != ALIVE_SERIES]
    summaries = summarize(store, metric_keys, window)
    histogram: dict[int, int] = {}
    for key in keys:
        if key.name.startswith(HTTP_STATUS_PREFIX):
            code = int(key.name[len(HTTP_STATUS_PREFIX):])
            hits = len(store.query(key, window))
            if hits:
                histogram[code] = histogram.get(code, 0) + hits
    crashed = any(s.value == 0.0 for key in keys if key.name == ALIVE_SERIES
                  for s in store.query(key, window))
    return BehaviorSnapshot(phase, window, summaries, crashed, histogram)


@dataclass(frozen=True)
class DomainVerdict:
    """Dominant HTTP status and its share; None when there was no HTTP data."""

    dominant_status: int | None
    share: float
    changed: bool
    note: str = ""


@dataclass(frozen=True)
class DiffReport:
    perturbation: PerturbationSpec | None
    verdict: Verdict
    during_labels: dict[str, SeriesLabel]
    after_labels: dict[str, SeriesLabel]
    domain: DomainVerdict
    notes: tuple[str, ...]
    columns_absent: bool

    def to_dict(self) -> dict:
        spec = None
        if self.perturbation is not None:
            spec = {
                "syscall": self.perturbation.syscall.name,
                "errno": self.perturbation.error.name if self.perturbation.error else None,
                "delay_ms": self.perturbation.delay.millis,
            }
        return {
            "perturbation": spec,
            "verdict": str(self.verdict),
            "during_labels": {k: str(v) for k, v in sorted(self.during_labels.items())},
            "after_labels": {k: str(v) for k, v in sorted(self.after_labels.items())},
            "domain": {
                "dominant_status": self.domain.dominant_status,
                "share": self.domain.share,
                "changed": self.domain.changed,
                "note": self.domain.note,
            },
            "notes": list(self.notes),
            "columns_absent": self.columns_absent,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def _dominant(histogram: dict[int, int], threshold: float) -> tuple[int | None, float]:
    total = sum(histogram.values())
    if total == 0:
        return None, 0.0
    code, hits = max(histogram.items(), key=lambda kv: (kv[1], -kv[0]))
    share = hits / total
    if share < threshold:
        return None, share
    return code, share


def diff(normal: BehaviorSnapshot, during: BehaviorSnapshot, after: BehaviorSnapshot,
         config: ClassifierConfig = DEFAULT_CLASSIFIER,
         perturbation: PerturbationSpec | None = None) -> DiffReport:
    """Compare perturbed behavior against the nominal baseline."""
    crashed = during.crashed or after.crashed
    notes: list[str] = []

    during_labels: dict[str, SeriesLabel] = {}
    after_labels: dict[str, SeriesLabel] = {}
    for name, baseline in sorted(normal.summaries.items()):
        if baseline.count == 0:
            continue
        kind = series_kind(name)
        during_labels[name] = label_series(
            baseline, during.summaries.get(name, EMPTY_STATS), kind, config)
        after_labels[name] = label_series(
            baseline, after.summaries.get(name, EMPTY_STATS), kind, config)

    norm_code, _ = _dominant(normal.http_status_histogram, config.dominant_share)
    dur_code, dur_share = _dominant(during.http_status_histogram, config.dominant_share)
    domain_changed = (norm_code is not None and dur_code is not None and norm_code != dur_code)
    domain_note = "response semantics changed" if domain_changed else ""
    domain = DomainVerdict(dur_code, dur_share, domain_changed, domain_note)

    if crashed:
        verdict = Verdict.CRASHED
        notes.append("target crashed during the experiment")
    else:
        deviated = domain_changed or any(
            lbl.band is not BehaviorLabel.NORMAL
            for lbl in (*during_labels.values(), *after_labels.values()))
        verdict = Verdict.DEGRADED if deviated else Verdict.SURVIVED
        lasting = sorted(n for n, lbl in after_labels.items()
                         if lbl.band is not BehaviorLabel.NORMAL)
        if lasting:
            notes.append("long-lasting influence on: " + ", ".join(lasting))

    columns_absent = during.crashed
    if columns_absent:
        during_labels = {}
        after_labels = {}

    return DiffReport(
        perturbation=perturbation,
        verdict=verdict,
        during_labels=during_labels,
        after_labels=after_labels,
        domain=domain,
        notes=tuple(notes),
        columns_absent=columns_absent,
    )
