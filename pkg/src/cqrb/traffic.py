"""Loop-detector ingestion, interval aggregation and curve-derived traffic parameters.

Units: speed km/h, flow veh/h per grouping unit, density veh/km per
grouping unit (per lane, or per direction unless lane-normalized).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, time
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence, TextIO, Union

import numpy as np

from .core import AggregatedObservation, Bag, PiecewiseLinearCurve, TrafficParameters, VehicleRecord

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("timestamp_iso8601", "station_id", "direction", "lane", "speed_kmh", "faulty")
OBSERVATION_COLUMNS = ("interval_start", "group", "k", "q", "v", "count")

PER_LANE = "per-lane"
PER_DIRECTION = "per-direction"


class TrafficDataError(ValueError):
    """Malformed input data; ``lineno`` is set for file input."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


# -- ingestion ---------------------------------------------------------------

def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValueError(f"invalid faulty flag {text!r}")


def _open_text(source) -> tuple[TextIO, bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8", newline=""), True
    return source, False


def parse_vehicle_records(source, column_map: Optional[Mapping[str, str]] = None) -> list[VehicleRecord]:
    """Read per-vehicle records from CSV.

    ``source`` is a path or an open text stream.  ``column_map`` renames
    source columns to the standard names, e.g. ``{"spd": "speed_kmh"}``,
    which is how other feed layouts are converted.
    """
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        rename = dict(column_map or {})
        names = [rename.get(h.strip(), h.strip()) for h in header]
        missing = [c for c in RECORD_COLUMNS if c not in names]
        if missing:
            raise TrafficDataError(f"missing columns: {', '.join(missing)}", 1)
        extra = [h for h in names if h not in RECORD_COLUMNS]
        if extra:
            warnings.warn(f"ignoring unknown columns: {', '.join(extra)}")
        pos = {c: names.index(c) for c in RECORD_COLUMNS}
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(names):
                raise TrafficDataError(f"expected {len(names)} fields, got {len(row)}", lineno)
            try:
                rec = VehicleRecord(
                    timestamp=_parse_timestamp(row[pos["timestamp_iso8601"]]),
                    station_id=row[pos["station_id"]].strip(),
                    direction=int(row[pos["direction"]]),
                    lane=int(row[pos["lane"]]),
                    speed=float(row[pos["speed_kmh"]]),
                    faulty=_parse_bool(row[pos["faulty"]]),
                )
            except ValueError as exc:
                raise TrafficDataError(str(exc), lineno) from None
            records.append(rec)
        return records
    finally:
        if owned:
            fh.close()


def records_to_csv(records: Iterable[VehicleRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.timestamp.isoformat(), r.station_id, r.direction, r.lane,
                    repr(r.speed), int(r.faulty)])
    return buf.getvalue()


class FilterResult(NamedTuple):
    kept: list
    dropped_count: int


def filter_faulty(records: Iterable[VehicleRecord]) -> FilterResult:
    records = list(records)
    kept = [r for r in records if not r.faulty]
    return FilterResult(kept, len(records) - len(kept))


# -- aggregation -------------------------------------------------------------

@dataclass(frozen=True)
class AggregationSpec:
    interval: int = 5
    grouping: str = PER_DIRECTION
    peak_start: time = time(6, 0)
    peak_end: time = time(20, 0)
    # optional inclusive date filter
    date_range: Optional[tuple[date, date]] = None
    # per-direction only: divide flow and density by the number of lanes
    normalize_lanes: bool = False

    def __post_init__(self):
        if self.interval < 1 or 60 % self.interval:
            raise ValueError(f"interval must divide 60 minutes, got {self.interval}")
        if self.grouping not in (PER_LANE, PER_DIRECTION):
            raise ValueError(f"grouping must be {PER_LANE!r} or {PER_DIRECTION!r}")
        if not self.peak_start < self.peak_end:
            raise ValueError("peak window is empty")
        if self.date_range is not None and self.date_range[1] < self.date_range[0]:
            raise ValueError("date range ends before it starts")

    def in_window(self, ts: datetime) -> bool:
        if not (self.peak_start <= ts.time() < self.peak_end):
            return False
        if self.date_range is not None:
            return self.date_range[0] <= ts.date() <= self.date_range[1]
        return True


def parse_peak_window(text: str) -> tuple[time, time]:
    """``"06:00-20:00"`` -> (time(6), time(20))."""
    try:
        a, b = text.split("-")
        return time.fromisoformat(a.strip()), time.fromisoformat(b.strip())
    except ValueError:
        raise ValueError(f"peak window must look like HH:MM-HH:MM, got {text!r}") from None


def interval_start(ts: datetime, minutes: int) -> datetime:
    floored = ts.minute - ts.minute % minutes
    return ts.replace(minute=floored, second=0, microsecond=0)


def group_key(rec: VehicleRecord, grouping: str) -> str:
    if grouping == PER_LANE:
        return f"{rec.station_id}:{rec.direction}:{rec.lane}"
    return f"{rec.station_id}:{rec.direction}"


@dataclass
class AggregationSummary:
    records_in: int = 0
    outside_window: int = 0
    used: int = 0
    zero_speed: int = 0
    # vehicles in intervals where every member had zero speed
    zero_speed_only: int = 0
    intervals: int = 0
    lanes: dict = field(default_factory=dict)


def aggregate_detailed(records: Iterable[VehicleRecord], spec: AggregationSpec):
    """Aggregate and return ``(observations, AggregationSummary)``."""
    summary = AggregationSummary()
    counts: dict = defaultdict(int)
    inv_speed: dict = defaultdict(float)
    moving: dict = defaultdict(int)
    lanes: dict = defaultdict(set)
    for rec in records:
        summary.records_in += 1
        if not spec.in_window(rec.timestamp):
            summary.outside_window += 1
            continue
        key = (interval_start(rec.timestamp, spec.interval), group_key(rec, spec.grouping))
        counts[key] += 1
        lanes[(rec.station_id, rec.direction)].add(rec.lane)
        if rec.speed > 0:
            inv_speed[key] += 1.0 / rec.speed
            moving[key] += 1
        else:
            summary.zero_speed += 1
    if summary.zero_speed:
        warnings.warn(f"{summary.zero_speed} zero-speed records left out of the speed means")
    per_hour = 60.0 / spec.interval
    out = []
    for key in sorted(counts):
        start, gkey = key
        c = counts[key]
        if moving[key] == 0:
            summary.zero_speed_only += c
            continue
        v = moving[key] / inv_speed[key]
        q = c * per_hour
        if spec.normalize_lanes and spec.grouping == PER_DIRECTION:
            station, direction = gkey.rsplit(":", 1)
            q /= len(lanes[(station, int(direction))])
        out.append(AggregatedObservation(k=q / v, q=q, v=v, interval_start=start,
                                         group_key=gkey, count=c))
        summary.used += c
    summary.intervals = len(out)
    summary.lanes = {f"{s}:{d}": len(v) for (s, d), v in sorted(lanes.items())}
    return out, summary


def aggregate(records: Iterable[VehicleRecord], spec: AggregationSpec = AggregationSpec()) -> list[AggregatedObservation]:
    """Interval observations: flow from counts, harmonic-mean speed, density q/v."""
    return aggregate_detailed(records, spec)[0]


def period_label(ts: Union[datetime, date], period: str) -> str:
    """ISO week ``2016-W10`` or month ``2016-03``."""
    if period == "week":
        y, w, _ = ts.isocalendar()
        return f"{y}-W{w:02d}"
    if period == "month":
        return f"{ts.year}-{ts.month:02d}"
    raise ValueError(f"period must be 'week' or 'month', got {period!r}")


def split_by_period(observations: Iterable[AggregatedObservation], period: str) -> dict[str, list]:
    buckets: dict = defaultdict(list)
    for o in observations:
        if o.interval_start is None:
            raise TrafficDataError("observation without interval start cannot be assigned a period")
        buckets[period_label(o.interval_start, period)].append(o)
    return dict(sorted(buckets.items()))


def observations_to_csv(observations: Iterable[AggregatedObservation]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBSERVATION_COLUMNS)
    for o in observations:
        ts = o.interval_start.isoformat() if o.interval_start is not None else ""
        w.writerow([ts, o.group_key, repr(o.k), repr(o.q), repr(o.v), o.count])
    return buf.getvalue()


def read_observations(source) -> list[AggregatedObservation]:
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != OBSERVATION_COLUMNS:
            raise TrafficDataError(f"header must be {','.join(OBSERVATION_COLUMNS)}", 1)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts, g, k, q, v, c = row
                out.append(AggregatedObservation(
                    k=float(k), q=float(q), v=float(v),
                    interval_start=datetime.fromisoformat(ts) if ts else None,
                    group_key=g, count=int(c)))
            except ValueError as exc:
                raise TrafficDataError(str(exc), lineno) from None
        return out
    finally:
        if owned:
            fh.close()


def write_observations(path, observations: Iterable[AggregatedObservation]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(observations_to_csv(observations))


# -- parameters --------------------------------------------------------------

def extract_traffic_parameters(curve: PiecewiseLinearCurve, intercept_tol: float = 1e-6) -> TrafficParameters:
    """Capacity, critical and jam density, free-flow and wave speeds of a fitted curve."""
    notes = []
    knots = curve.knots
    values = np.asarray(curve(knots), dtype=float)
    i = int(np.argmax(values))  # first maximum = smallest density on ties
    q_c, k_c = float(values[i]), float(knots[i])
    last = curve.segments[-1]
    k_j = -last.alpha / last.beta if last.beta < 0 else None
    first = curve.segments[0]
    v_f = first.beta
    if abs(first.alpha) > intercept_tol * max(1.0, abs(q_c)):
        notes.append(f"first segment has nonzero intercept {first.alpha:.6g}")
    if curve.piece_count == 1 and first.beta >= 0:
        notes.append("single rising piece: capacity is at the domain end and jam density is undefined")
    if k_j is None:
        notes.append("no falling segment: jam density undefined")
    for n in notes:
        log.info(n)
    return TrafficParameters(capacity=q_c, critical_density=k_c, jam_density=k_j,
                             free_flow_speed=v_f, wave_speeds=tuple(curve.betas.tolist()),
                             piece_count=curve.piece_count, warnings=tuple(notes))


CONGESTED_SHARE_MIN = 0.15


def congested_share(bags: Sequence[Bag], k_c: float, weighted: bool = False) -> float:
    """Share of bags with centroid density above ``k_c`` (bag count, or weight if ``weighted``)."""
    if not bags:
        raise ValueError("no bags")
    if not math.isfinite(k_c):
        raise ValueError("k_c must be finite")
    above = [b for b in bags if b.k_centroid > k_c]
    if weighted:
        return float(sum(b.weight for b in above) / sum(b.weight for b in bags))
    return len(above) / len(bags)


def passes_congested_filter(share: float, threshold: float = CONGESTED_SHARE_MIN) -> bool:
    return share >= threshold
