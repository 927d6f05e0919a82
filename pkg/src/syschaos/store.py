"""Embedded append-only time-series store for experiment metrics.

One process-local store holds every monitored series for a campaign. Samples
are kept in per-series append-only lists, so queries can take a consistent
snapshot without blocking writers. The on-disk format is one UTF-8 line per
sample::

    <series-name>{<k=v,...>} <timestamp-ns> <value>

which is human-inspectable and diffable. Out-of-order appends are rejected
rather than reordered; rejections are counted per store.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
import re
import threading
from dataclasses import dataclass, field

_NAME_RE = re.compile(r"[A-Za-z0-9_.:/-]+")
_LINE_RE = re.compile(r"^([A-Za-z0-9_.:/-]+)(?:\{([^}]*)\})? (\d+) (\S+)$")


class OutOfOrderError(ValueError):
    """Raised when a sample's timestamp does not advance its series."""


@dataclass(frozen=True)
class MetricSample:
    """One observation: monotonic nanosecond timestamp and a finite value."""

    timestamp: int
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"sample value must be finite, got {self.value}")


@dataclass(frozen=True)
class TimeRange:
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"inverted time range: {self.start} > {self.end}")

    def contains(self, t: int) -> bool:
        return self.start <= t <= self.end

    @property
    def duration_s(self) -> float:
        return (self.end - self.start) / 1e9


@dataclass(frozen=True)
class SeriesKey:
    """A series name plus an ordered set of labels (e.g. phase, experiment id)."""

    name: str
    labels: tuple[tuple[str, str], ...] = ()

    def __init__(self, name: str, labels=None):
        if not name or not _NAME_RE.fullmatch(name):
            raise ValueError(f"bad series name {name!r}")
        pairs = tuple(labels.items()) if isinstance(labels, dict) else tuple(labels or ())
        seen = set()
        for k, v in pairs:
            if k in seen:
                raise ValueError(f"duplicate label key {k!r}")
            seen.add(k)
            if not _NAME_RE.fullmatch(k) or not _NAME_RE.fullmatch(v):
                raise ValueError(f"bad label {k!r}={v!r}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "labels", pairs)

    def __str__(self) -> str:
        if not self.labels:
            return self.name
        inner = ",".join(f"{k}={v}" for k, v in self.labels)
        return f"{self.name}{{{inner}}}"

    @classmethod
    def parse(cls, text: str) -> "SeriesKey":
        m = re.fullmatch(r"([A-Za-z0-9_.:/-]+)(?:\{([^}]*)\})?", text)
        if not m:
            raise ValueError(f"unparseable series key {text!r}")
        labels = []
        if m.group(2):
            for part in m.group(2).split(","):
                k, _, v = part.partition("=")
                labels.append((k, v))
        return cls(m.group(1), labels)

    def label(self, key: str) -> str | None:
        for k, v in self.labels:
            if k == key:
                return v
        return None


class _Series:
    __slots__ = ("timestamps", "values", "lock")

    def __init__(self):
        self.timestamps: list[int] = []
        self.values: list[float] = []
        self.lock = threading.Lock()


@dataclass
class MetricsStore:
    """Append-only store; optionally mirrors accepted samples to ``path``."""

    path: str | None = None
    _series: dict[SeriesKey, _Series] = field(default_factory=dict)
    _index_lock: threading.Lock = field(default_factory=threading.Lock)
    _file_lock: threading.Lock = field(default_factory=threading.Lock)
    _pending: list[str] = field(default_factory=list)
    rejected: int = 0

    def append(self, key: SeriesKey, sample: MetricSample) -> None:
        with self._index_lock:
            series = self._series.get(key)
            if series is None:
                series = self._series[key] = _Series()
        with series.lock:
            if series.timestamps and sample.timestamp <= series.timestamps[-1]:
                self.rejected += 1
                raise OutOfOrderError(
                    f"timestamp {sample.timestamp} does not advance series {key} "
                    f"(last {series.timestamps[-1]})"
                )
            series.timestamps.append(sample.timestamp)
            series.values.append(sample.value)
        if self.path is not None:
            with self._file_lock:
                self._pending.append(f"{key} {sample.timestamp} {sample.value!r}\n")

    def append_point(self, key: SeriesKey, timestamp: int, value: float) -> None:
        self.append(key, MetricSample(timestamp, value))

    def keys(self) -> list[SeriesKey]:
        with self._index_lock:
            return list(self._series)

    def last_timestamp(self, key: SeriesKey) -> int | None:
        series = self._series.get(key)
        if series is None or not series.timestamps:
            return None
        return series.timestamps[-1]

    def query(self, key: SeriesKey, time_range: TimeRange) -> list[MetricSample]:
        """All samples with start <= t <= end, ascending; [] when none."""
        series = self._series.get(key)
        if series is None:
            return []
        # Consistent prefix: appends only extend, so a length snapshot is safe.
        n = len(series.timestamps)
        ts = series.timestamps[:n]
        vs = series.values[:n]
        lo = bisect.bisect_left(ts, time_range.start)
        hi = bisect.bisect_right(ts, time_range.end)
        return [MetricSample(t, v) for t, v in zip(ts[lo:hi], vs[lo:hi])]

    def aggregate(
        self, key: SeriesKey, time_range: TimeRange, window_ms: int, fn: str
    ) -> list[MetricSample]:
        """Windowed aggregation; one output sample per window at its start.

        ``fn`` is one of mean/max/min/rate; ``rate`` treats the series as a
        cumulative counter: (last - first) / window seconds, 0 for windows
        with fewer than two samples.
        """
        if window_ms <= 0:
            raise ValueError("window must be > 0 ms")
        if fn not in ("mean", "max", "min", "rate"):
            raise ValueError(f"unknown aggregate fn {fn!r}")
        samples = self.query(key, time_range)
        window_ns = window_ms * 1_000_000
        out: list[MetricSample] = []
        start = time_range.start
        i = 0
        while start <= time_range.end:
            end = min(start + window_ns - 1, time_range.end)
            bucket: list[MetricSample] = []
            while i < len(samples) and samples[i].timestamp <= end:
                bucket.append(samples[i])
                i += 1
            if bucket:
                if fn == "mean":
                    value = sum(s.value for s in bucket) / len(bucket)
                elif fn == "max":
                    value = max(s.value for s in bucket)
                elif fn == "min":
                    value = min(s.value for s in bucket)
                else:
                    if len(bucket) < 2:
                        value = 0.0
                    else:
                        value = (bucket[-1].value - bucket[0].value) / (window_ms / 1000.0)
                out.append(MetricSample(start, value))
            start += window_ns
        return out

    # -- persistence ---------------------------------------------------

    def flush(self, fsync: bool = False) -> None:
        """Write buffered lines to ``path``; fsync on phase boundaries only."""
        if self.path is None:
            return
        with self._file_lock:
            if not self._pending and not fsync:
                return
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.writelines(self._pending)
                self._pending.clear()
                fh.flush()
                if fsync:
                    import os

                    os.fsync(fh.fileno())

    def export_lines(self, fh: io.TextIOBase) -> None:
        """Dump every accepted sample in the line format, grouped by series."""
        for key in sorted(self._series, key=str):
            series = self._series[key]
            n = len(series.timestamps)
            for t, v in zip(series.timestamps[:n], series.values[:n]):
                fh.write(f"{key} {t} {v!r}\n")

    def export_csv(self, fh: io.TextIOBase) -> None:
        """CSV export: series,timestamp_ns,value with labels flattened."""
        writer = csv.writer(fh)
        writer.writerow(["series", "timestamp_ns", "value"])
        for key in sorted(self._series, key=str):
            series = self._series[key]
            n = len(series.timestamps)
            for t, v in zip(series.timestamps[:n], series.values[:n]):
                writer.writerow([str(key), t, repr(v)])

    def import_lines(self, fh: io.TextIOBase) -> int:
        count = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            m = _LINE_RE.match(line)
            if not m:
                raise ValueError(f"line {lineno}: unparseable sample {line!r}")
            name, labels, ts, value = m.groups()
            key = SeriesKey.parse(f"{name}{{{labels}}}" if labels else name)
            self.append(key, MetricSample(int(ts), float(value)))
            count += 1
        return count

    def import_csv(self, fh: io.TextIOBase) -> int:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["series", "timestamp_ns", "value"]:
            raise ValueError(f"unexpected CSV header {header!r}")
        count = 0
        for row in reader:
            if not row:
                continue
            key = SeriesKey.parse(row[0])
            self.append(key, MetricSample(int(row[1]), float(row[2])))
            count += 1
        return count

    @classmethod
    def load(cls, path: str) -> "MetricsStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            store.import_lines(fh)
        return store
