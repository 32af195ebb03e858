"""Parsing and cleaning of the accident, congestion, weather and POI tables."""
from __future__ import annotations

import csv
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

POI_KINDS = (
    "amenity", "bump", "crossing", "give_way", "junction", "no_exit", "railway",
    "roundabout", "station", "stop", "traffic_calming", "traffic_signal", "turning_loop",
)
POI_COLUMNS = tuple("_".join(p.capitalize() for p in k.split("_")) for k in POI_KINDS)
DAYPART_COLUMNS = ("Sunrise_Sunset", "Civil_Twilight", "Nautical_Twilight", "Astronomical_Twilight")
DAYPART_VALUES = ("Day", "Night")

ACCIDENT_SEVERITIES = (1, 2, 3, 4)
# congestion reports use words; they share the accident 1-4 scale
CONGESTION_SEVERITY_WORDS = {"fast": 1, "moderate": 2, "slow": 3, "queuing": 4}

WEATHER_CONDITIONS = (
    "Mostly Cloudy", "Scattered Clouds", "Partly Cloudy", "Clear", "Light Rain", "Overcast",
    "Heavy Rain", "Rain", "Haze", "Patches of Fog", "Fog", "Shallow Fog", "Thunderstorm",
    "Light Drizzle", "Thunderstorms and Rain", "Cloudy", "Fair", "Mist", "Mostly Cloudy / Windy",
    "Fair / Windy", "Partly Cloudy / Windy", "Light Rain with Thunder",
)
WIND_DIRECTIONS = (
    "E", "W", "CALM", "S", "N", "SE", "NNE", "NNW", "SSE", "ESE", "NE", "NW", "WSW", "ENE",
    "SW", "SSW", "WNW",
)

# airport weather stations (lat, lon)
STATIONS = {
    "LAX": (33.9425, -118.4081),
    "BUR": (34.2007, -118.3585),
    "VNY": (34.2098, -118.4898),
    "WHP": (34.2593, -118.4134),
}

ACCIDENT_COLUMNS = (
    "ID", "Severity", "Start_Time", "End_Time", "Start_Lat", "Start_Lng", "Distance(mi)",
    "Street", "Timezone", *POI_COLUMNS, *DAYPART_COLUMNS,
)
CONGESTION_COLUMNS = (
    "ID", "Severity", "Start_Time", "Duration(min)", "Start_Lat", "Start_Lng", "Distance(mi)",
    "Timezone", "Description",
)
WEATHER_NUMERIC = {
    "temperature": "Temperature(F)",
    "wind_chill": "Wind_Chill(F)",
    "humidity": "Humidity(%)",
    "pressure": "Pressure(in)",
    "visibility": "Visibility(mi)",
    "wind_speed": "Wind_Speed(mph)",
    "precipitation": "Precipitation(in)",
}
WEATHER_CATEGORICAL = {"wind_direction": "Wind_Direction", "condition": "Weather_Condition"}
WEATHER_COLUMNS = ("Airport", "Date", "Hour", *WEATHER_NUMERIC.values(), *WEATHER_CATEGORICAL.values())
POI_FILE_COLUMNS = ("Lat", "Lng", "Kind")

REJECT_ABORT_FRACTION = 0.5


class IngestError(ValueError):
    pass


class NoDelayMention(ValueError):
    pass


# --------------------------------------------------------------------------
# record types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AccidentRecord:
    id: str
    severity: int
    start_time: datetime
    end_time: datetime
    start_lat: float
    start_lon: float
    distance: float
    street: str = ""
    tz: str = "UTC"
    poi: tuple[bool, ...] = (False,) * len(POI_KINDS)
    daypart: tuple[str, ...] = ("Day",) * len(DAYPART_COLUMNS)

    @property
    def duration(self) -> float:
        """Minutes between start and end."""
        return (self.end_time - self.start_time).total_seconds() / 60.0


@dataclass(frozen=True)
class CongestionRecord:
    id: str
    severity: int
    time: datetime
    duration: float
    lat: float
    lon: float
    distance: float
    description: str
    tz: str = "UTC"
    delay: float | None = None


@dataclass(frozen=True)
class WeatherRecord:
    airport: str
    time: datetime
    temperature: float | None = None
    wind_chill: float | None = None
    humidity: float | None = None
    pressure: float | None = None
    visibility: float | None = None
    wind_speed: float | None = None
    precipitation: float | None = None
    wind_direction: str | None = None
    condition: str | None = None


@dataclass(frozen=True)
class PoiRecord:
    lat: float
    lon: float
    kind: str


@dataclass
class ParseResult:
    records: list
    rejects: list[tuple[int, str]] = field(default_factory=list)


# --------------------------------------------------------------------------
# field parsing
# --------------------------------------------------------------------------

def parse_time(text: str, tz_name: str = "UTC") -> datetime:
    """Parse an ISO-like timestamp to aware UTC.

    An explicit offset in ``text`` wins; otherwise ``tz_name`` localises it.
    """
    text = text.strip()
    if not text:
        raise ValueError("empty timestamp")
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        t = t.replace(tzinfo=ZoneInfo(tz_name or "UTC"))
    return t.astimezone(timezone.utc)


def _finite(text: str, name: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"{name} not finite")
    return v


def _optional_float(text: str) -> float | None:
    text = text.strip()
    return None if text == "" else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1"):
        return True
    if t in ("false", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _accident_row(row: dict) -> AccidentRecord:
    tz = row["Timezone"].strip() or "UTC"
    sev = int(row["Severity"])
    if sev not in ACCIDENT_SEVERITIES:
        raise ValueError(f"severity {sev} outside {ACCIDENT_SEVERITIES}")
    start = parse_time(row["Start_Time"], tz)
    end = parse_time(row["End_Time"], tz)
    if end < start:
        raise ValueError("end_time before start_time")
    dist = _finite(row["Distance(mi)"], "distance")
    if dist < 0:
        raise ValueError("negative distance")
    daypart = tuple(row[c].strip() for c in DAYPART_COLUMNS)
    for v in daypart:
        if v not in DAYPART_VALUES:
            raise ValueError(f"day-part value {v!r}")
    return AccidentRecord(
        id=row["ID"].strip(), severity=sev, start_time=start, end_time=end,
        start_lat=_finite(row["Start_Lat"], "lat"), start_lon=_finite(row["Start_Lng"], "lon"),
        distance=dist, street=row["Street"].strip(), tz=tz,
        poi=tuple(_bool(row[c]) for c in POI_COLUMNS), daypart=daypart,
    )


def congestion_severity(text: str) -> int:
    t = text.strip().lower()
    if t in CONGESTION_SEVERITY_WORDS:
        return CONGESTION_SEVERITY_WORDS[t]
    v = int(t)
    if v not in ACCIDENT_SEVERITIES:
        raise ValueError(f"severity {v} outside {ACCIDENT_SEVERITIES}")
    return v


def _congestion_row(row: dict) -> CongestionRecord:
    tz = row["Timezone"].strip() or "UTC"
    dur = _finite(row["Duration(min)"], "duration")
    dist = _finite(row["Distance(mi)"], "distance")
    if dur < 0 or dist < 0:
        raise ValueError("negative duration or distance")
    delay = None
    if row.get("Delay(min)", "").strip():
        delay = _finite(row["Delay(min)"], "delay")
        if delay < 0:
            raise ValueError("negative delay")
    return CongestionRecord(
        id=row["ID"].strip(), severity=congestion_severity(row["Severity"]),
        time=parse_time(row["Start_Time"], tz), duration=dur,
        lat=_finite(row["Start_Lat"], "lat"), lon=_finite(row["Start_Lng"], "lon"),
        distance=dist, description=row["Description"], tz=tz, delay=delay,
    )


def _weather_row(row: dict) -> WeatherRecord:
    airport = row["Airport"].strip()
    hour = int(row["Hour"])
    if not 0 <= hour <= 23:
        raise ValueError(f"hour {hour}")
    t = datetime.fromisoformat(row["Date"].strip()).replace(hour=hour, tzinfo=timezone.utc)
    vals = {k: _optional_float(row[c]) for k, c in WEATHER_NUMERIC.items()}
    h = vals["humidity"]
    if h is not None and not 0 <= h <= 100:
        raise ValueError(f"humidity {h} outside [0, 100]")
    cats = {k: (row[c].strip() or None) for k, c in WEATHER_CATEGORICAL.items()}
    if cats["wind_direction"] is not None and cats["wind_direction"] not in WIND_DIRECTIONS:
        raise ValueError(f"wind direction {cats['wind_direction']!r}")
    if cats["condition"] is not None and cats["condition"] not in WEATHER_CONDITIONS:
        raise ValueError(f"weather condition {cats['condition']!r}")
    return WeatherRecord(airport=airport, time=t, **vals, **cats)


def _poi_row(row: dict) -> PoiRecord:
    kind = row["Kind"].strip().lower()
    if kind not in POI_KINDS:
        raise ValueError(f"POI kind {kind!r}")
    return PoiRecord(lat=_finite(row["Lat"], "lat"), lon=_finite(row["Lng"], "lon"), kind=kind)


SCHEMAS = {
    "accident": (ACCIDENT_COLUMNS, _accident_row),
    "congestion": (CONGESTION_COLUMNS, _congestion_row),
    "weather": (WEATHER_COLUMNS, _weather_row),
    "poi": (POI_FILE_COLUMNS, _poi_row),
}


def parse_dataset(path, kind: str) -> ParseResult:
    """Read one CSV into typed records.

    Rows failing validation go to ``rejects`` as ``(line, reason)``. More
    than half the rows rejected aborts with :class:`IngestError`.
    """
    if kind not in SCHEMAS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    columns, convert = SCHEMAS[kind]
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    result = ParseResult(records=[])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise IngestError(f"{path.name}: header lacks {kind} columns {missing}")
        line = reader.line_num
        for row in reader:
            start_line, line = line + 1, reader.line_num
            if None in row or any(v is None for v in row.values()):
                result.rejects.append((start_line, "wrong field count"))
                continue
            try:
                result.records.append(convert(row))
            except (ValueError, KeyError) as exc:
                result.rejects.append((start_line, str(exc)))
    total = len(result.records) + len(result.rejects)
    if total and len(result.rejects) / total > REJECT_ABORT_FRACTION:
        sample = "; ".join(f"line {n}: {r}" for n, r in result.rejects[:5])
        raise IngestError(f"{path.name}: {len(result.rejects)}/{total} rows rejected ({sample})")
    if result.rejects:
        log.warning("%s: %d rows rejected", path.name, len(result.rejects))
    return result


def write_rejects(path, rejects: dict[str, list[tuple[int, str]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "line", "reason"])
        for name in sorted(rejects):
            for line, reason in rejects[name]:
                w.writerow([name, line, reason])


# --------------------------------------------------------------------------
# writing (clean tables share the raw schemas)
# --------------------------------------------------------------------------

def format_time(t: datetime, tz_name: str = "UTC") -> str:
    return t.astimezone(ZoneInfo(tz_name)).isoformat(sep=" ")


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_accidents(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ACCIDENT_COLUMNS)
        for r in records:
            w.writerow([
                r.id, r.severity, format_time(r.start_time, r.tz), format_time(r.end_time, r.tz),
                _num(r.start_lat), _num(r.start_lon), _num(r.distance), r.street, r.tz,
                *("True" if f else "False" for f in r.poi), *r.daypart,
            ])


def write_congestion(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*CONGESTION_COLUMNS, "Delay(min)"])
        for r in records:
            w.writerow([
                r.id, r.severity, format_time(r.time, r.tz), _num(r.duration), _num(r.lat),
                _num(r.lon), _num(r.distance), r.tz, r.description, _num(r.delay),
            ])


def write_weather(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(WEATHER_COLUMNS)
        for r in records:
            w.writerow([
                r.airport, r.time.date().isoformat(), r.time.hour,
                *(_num(getattr(r, k)) for k in WEATHER_NUMERIC),
                *((getattr(r, k) or "") for k in WEATHER_CATEGORICAL),
            ])


def write_poi(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POI_FILE_COLUMNS)
        for r in records:
            w.writerow([_num(r.lat), _num(r.lon), r.kind])


# --------------------------------------------------------------------------
# delay extraction
# --------------------------------------------------------------------------

_UNITS = ("zero one two three four five six seven eight nine ten eleven twelve thirteen "
          "fourteen fifteen sixteen seventeen eighteen nineteen").split()
_TENS = "twenty thirty forty fifty sixty seventy eighty ninety".split()


def _number_words() -> dict[str, int]:
    words = {w: i for i, w in enumerate(_UNITS)}
    for t, tens in enumerate(_TENS, start=2):
        words[tens] = 10 * t
        for u in range(1, 10):
            words[f"{tens}-{_UNITS[u]}"] = 10 * t + u
            words[f"{tens} {_UNITS[u]}"] = 10 * t + u
    return words


NUMBER_WORDS = _number_words()
_WORD_ALT = "|".join(sorted((re.escape(w).replace(r"\ ", r"\s+") for w in NUMBER_WORDS),
                            key=len, reverse=True))
_NUM = rf"(?P<num>\d+(?:\.\d+)?|{_WORD_ALT})"
_UNIT = r"(?P<unit>minutes?|mins?|hours?|hrs?)"
_DELAY_PATTERNS = (
    re.compile(rf"\bdelays?\s+of\s+(?:about\s+|up\s+to\s+)?{_NUM}\s+{_UNIT}\b", re.IGNORECASE),
    re.compile(rf"\b{_NUM}[\s-]+{_UNIT}\s+delays?\b", re.IGNORECASE),
)


def _to_number(token: str) -> float:
    token = re.sub(r"\s+", " ", token.strip().lower())
    if token[0].isdigit():
        return float(token)
    return float(NUMBER_WORDS[token])


def extract_delay(description: str) -> float:
    """Delay in minutes from the first delay phrase of a congestion report.

    Numbers may be digits or words up to ninety-nine; hours convert to minutes.
    Raises :class:`NoDelayMention` when no phrase matches.
    """
    best = None
    for pat in _DELAY_PATTERNS:
        m = pat.search(description or "")
        if m and (best is None or m.start() < best.start()):
            best = m
    if best is None:
        raise NoDelayMention(description)
    value = _to_number(best.group("num"))
    if best.group("unit").lower().startswith("h"):
        value *= 60.0
    return value


def attach_delays(records: list[CongestionRecord]) -> tuple[list[CongestionRecord], int]:
    """Fill ``delay`` from each description; returns records and the miss count."""
    out, misses = [], 0
    for r in records:
        try:
            out.append(replace(r, delay=extract_delay(r.description)))
        except NoDelayMention:
            misses += 1
            out.append(replace(r, delay=None))
    return out, misses


# --------------------------------------------------------------------------
# cleaning
# --------------------------------------------------------------------------

DEDUP_MAX_SECONDS = 300
DEDUP_MAX_KM = 0.1


def dedup_accidents(records: list[AccidentRecord], max_seconds: int = DEDUP_MAX_SECONDS,
                    max_km: float = DEDUP_MAX_KM) -> list[AccidentRecord]:
    """Collapse double reports: same street, within ``max_km`` and ``max_seconds``.

    The earliest report (ties: smallest id) survives. Output is ordered by
    ``(start_time, id)`` whatever the input order.
    """
    ordered = sorted(records, key=lambda r: (r.start_time, r.id))
    if not ordered:
        return []
    streets = {s: i for i, s in enumerate(sorted({r.street for r in ordered}))}
    t = np.array([int(r.start_time.timestamp()) for r in ordered], dtype=np.int64)
    lat = np.array([r.start_lat for r in ordered])
    lon = np.array([r.start_lon for r in ordered])
    street = np.array([streets[r.street] for r in ordered], dtype=np.int64)
    dup = _kernels.duplicate_scan(t, lat, lon, street, max_seconds, max_km)
    if dup.any():
        log.info("dedup removed %d of %d accident reports", int(dup.sum()), len(ordered))
    return [r for r, d in zip(ordered, dup) if not d]


def impute_missing(records: list[WeatherRecord], k: int = 2, stations=STATIONS,
                   km_scale: float = 10.0) -> list[WeatherRecord]:
    """Fill weather gaps from the ``k`` nearest complete observations.

    Distance is ``|dt| in hours + great-circle km / km_scale`` between
    station-hours. Numeric gaps take the neighbours' mean, categorical gaps
    their mode (ties go to the nearer neighbour). Neighbours are drawn only
    from originally observed values.
    """
    if not records:
        return []
    unknown = {r.airport for r in records} - set(stations)
    if unknown:
        raise IngestError(f"no coordinates for stations {sorted(unknown)}")
    hours = np.array([r.time.timestamp() / 3600.0 for r in records])
    lat = np.array([stations[r.airport][0] for r in records])
    lon = np.array([stations[r.airport][1] for r in records])

    updates: list[dict] = [dict() for _ in records]
    for name in (*WEATHER_NUMERIC, *WEATHER_CATEGORICAL):
        vals = [getattr(r, name) for r in records]
        have = np.array([v is not None for v in vals])
        if have.all():
            continue
        if not have.any():
            raise IngestError(f"weather feature {name!r} is missing everywhere")
        if have.sum() < k:
            raise IngestError(f"weather feature {name!r} has fewer than {k} observed values")
        cand = np.flatnonzero(have)
        ct, clat, clon = hours[cand], lat[cand], lon[cand]
        for i in np.flatnonzero(~have):
            nn = cand[_kernels.nearest_k(hours[i], lat[i], lon[i], ct, clat, clon, k, km_scale)]
            neigh = [vals[j] for j in nn]
            if name in WEATHER_NUMERIC:
                updates[i][name] = float(np.mean(neigh))
            else:
                counts = Counter(neigh)
                top = max(counts.values())
                updates[i][name] = next(v for v in neigh if counts[v] == top)
    return [replace(r, **u) if u else r for r, u in zip(records, updates)]


def clip_outliers(values) -> np.ndarray:
    """Winsorise at mean +/- 3 population std of the original column.

    NaNs pass through untouched.
    """
    v = np.asarray(values, dtype=float)
    finite = v[np.isfinite(v)]
    if finite.size < 2:
        raise ValueError("clip_outliers needs at least two finite values")
    mu, sd = finite.mean(), finite.std()
    if sd == 0:
        return v.copy()
    return np.where(np.isfinite(v), np.clip(v, mu - 3 * sd, mu + 3 * sd), v)


def clip_weather(records: list[WeatherRecord]) -> list[WeatherRecord]:
    cols = {}
    for name in WEATHER_NUMERIC:
        col = np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in records])
        if np.isfinite(col).sum() >= 2:
            cols[name] = clip_outliers(col)
    out = []
    for i, r in enumerate(records):
        upd = {n: float(c[i]) for n, c in cols.items() if np.isfinite(c[i]) and c[i] != getattr(r, n)}
        out.append(replace(r, **upd) if upd else r)
    return out


@dataclass
class RedundancyReport:
    correlated: list[tuple[str, str, float]] = field(default_factory=list)  # (dropped, kept, r)
    dominant: list[tuple[str, str, float]] = field(default_factory=list)  # (dropped, value, freq)

    @property
    def dropped(self) -> list[str]:
        return [c for c, _, _ in self.correlated] + [c for c, _, _ in self.dominant]


def _is_categorical(col: np.ndarray) -> bool:
    return col.dtype.kind in "bOUS"


def drop_redundant(table: dict[str, np.ndarray], corr_threshold: float = 0.95,
                   freq_threshold: float = 0.90) -> tuple[dict[str, np.ndarray], RedundancyReport]:
    """Drop near-duplicate numeric columns and near-constant categoricals.

    Numeric columns are scanned in order; a column whose absolute Pearson
    correlation with an already kept column exceeds ``corr_threshold`` is
    dropped. Categorical (bool/str) columns whose modal value covers more
    than ``freq_threshold`` of rows are dropped.
    """
    report = RedundancyReport()
    kept: dict[str, np.ndarray] = {}
    numeric_kept: list[str] = []
    for name, col in table.items():
        col = np.asarray(col)
        if _is_categorical(col):
            if col.size:
                value, count = Counter(col.tolist()).most_common(1)[0]
                freq = count / col.size
                if freq > freq_threshold:
                    report.dominant.append((name, str(value), freq))
                    continue
            kept[name] = col
            continue
        x = col.astype(float)
        drop = None
        if x.std() > 0:
            for other in numeric_kept:
                y = kept[other].astype(float)
                if y.std() == 0:
                    continue
                r = float(np.corrcoef(x, y)[0, 1])
                if abs(r) > corr_threshold:
                    drop = (name, other, r)
                    break
        if drop:
            report.correlated.append(drop)
            continue
        kept[name] = col
        numeric_kept.append(name)
    return kept, report


def accident_table(records: list[AccidentRecord]) -> dict[str, np.ndarray]:
    table = {
        "Severity": np.array([r.severity for r in records], dtype=float),
        "Duration": np.array([r.duration for r in records]),
        "Distance": np.array([r.distance for r in records]),
    }
    for j, c in enumerate(POI_COLUMNS):
        table[c] = np.array([r.poi[j] for r in records], dtype=bool)
    for j, c in enumerate(DAYPART_COLUMNS):
        table[c] = np.array([r.daypart[j] for r in records], dtype=object)
    return table


def weather_table(records: list[WeatherRecord]) -> dict[str, np.ndarray]:
    table = {c: np.array([getattr(r, k) for r in records], dtype=float) for k, c in WEATHER_NUMERIC.items()}
    for k, c in WEATHER_CATEGORICAL.items():
        table[c] = np.array([getattr(r, k) for r in records], dtype=object)
    return table
